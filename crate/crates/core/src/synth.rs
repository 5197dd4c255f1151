//! Gaussian-cluster data on the unit sphere.
//!
//! Class means are unit vectors drawn uniformly and accepted only when every
//! pair is at least `separation` radians apart. A point of class `j` is
//! `normalize(mean_j + noise * N(0, I))`. Labels cycle through the classes,
//! so every class gets `n / c` points (plus one for the first `n % c`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::engine::ExampleStore;
use crate::error::{Error, Result};
use crate::model::{dot, l2_normalize, EngineConfig, FeatureVector, LabeledExample};

const MEAN_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub classes: usize,
    pub n: usize,
    pub dim: usize,
    /// Minimum pairwise angle between class means, radians.
    pub separation: f64,
    /// Per-coordinate standard deviation of the isotropic noise.
    pub noise: f64,
    /// Size of the held-out query pool.
    pub queries: usize,
    pub seed: u64,
}

impl Default for SynthParams {
    /// The benchmark setting: 3 classes, 6000 points in 16 dimensions.
    fn default() -> Self {
        SynthParams {
            classes: 3,
            n: 6000,
            dim: 16,
            separation: std::f64::consts::FRAC_PI_2,
            noise: 0.2,
            queries: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub params: SynthParams,
    pub means: Vec<FeatureVector>,
    pub train: Vec<(FeatureVector, u32)>,
    /// Held-out points from the same distribution, with true labels.
    pub queries: Vec<(FeatureVector, u32)>,
}

impl SyntheticData {
    pub fn private_examples(&self) -> impl Iterator<Item = LabeledExample> + '_ {
        self.train
            .iter()
            .map(|(f, l)| LabeledExample::private(f.clone(), *l))
    }

    pub fn store(&self, config: EngineConfig) -> Result<ExampleStore> {
        ExampleStore::from_examples(config, self.params.classes, self.private_examples())
    }
}

fn gaussian_vec(rng: &mut ChaCha20Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn sample_means(p: &SynthParams, rng: &mut ChaCha20Rng) -> Result<Vec<FeatureVector>> {
    let min_cos = p.separation.cos();
    let mut means: Vec<FeatureVector> = Vec::with_capacity(p.classes);
    let mut attempts = 0;
    while means.len() < p.classes {
        attempts += 1;
        if attempts > MEAN_ATTEMPTS * p.classes {
            return Err(Error::Infeasible(format!(
                "could not place {} means in {} dimensions at separation {}",
                p.classes, p.dim, p.separation
            )));
        }
        let v = gaussian_vec(rng, p.dim);
        let Ok(v) = l2_normalize(&v, means.len()) else { continue };
        // angle >= separation  <=>  cos <= cos(separation)
        if means.iter().all(|m| dot(m.as_slice(), v.as_slice()) <= min_cos) {
            means.push(v);
        }
    }
    Ok(means)
}

fn sample_point(mean: &FeatureVector, noise: f64, rng: &mut ChaCha20Rng) -> FeatureVector {
    loop {
        let v: Vec<f64> = mean
            .as_slice()
            .iter()
            .map(|m| m + noise * rng.sample::<f64, _>(StandardNormal))
            .collect();
        if let Ok(f) = l2_normalize(&v, 0) {
            return f;
        }
    }
}

pub fn generate_synthetic(p: &SynthParams) -> Result<SyntheticData> {
    if p.classes < 2 {
        return Err(Error::param("classes", "must be >= 2"));
    }
    if p.dim < 2 {
        return Err(Error::param("dim", "must be >= 2"));
    }
    if !(p.noise >= 0.0 && p.noise.is_finite()) {
        return Err(Error::param("noise", format!("must be >= 0, got {}", p.noise)));
    }
    if !(0.0..=std::f64::consts::PI).contains(&p.separation) {
        return Err(Error::Infeasible(format!("separation {} is outside [0, pi]", p.separation)));
    }
    if p.classes > 2 && p.separation > std::f64::consts::FRAC_PI_2 + 1e-12 && p.classes > p.dim + 1 {
        return Err(Error::Infeasible(format!(
            "more than {} obtuse-separated means do not fit in {} dimensions",
            p.dim + 1,
            p.dim
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(p.seed);
    let means = sample_means(p, &mut rng)?;
    let draw = |count: usize, rng: &mut ChaCha20Rng| -> Vec<(FeatureVector, u32)> {
        (0..count)
            .map(|i| {
                let label = (i % p.classes) as u32;
                (sample_point(&means[label as usize], p.noise, rng), label)
            })
            .collect()
    };
    let train = draw(p.n, &mut rng);
    let queries = draw(p.queries, &mut rng);
    Ok(SyntheticData {
        params: *p,
        means,
        train,
        queries,
    })
}
