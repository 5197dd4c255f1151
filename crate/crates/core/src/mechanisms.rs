//! Seeded Gaussian noise and the two release mechanisms built on it.
//!
//! Per query the engine draws exactly one count-noise sample followed by
//! `c` vote-noise samples, in class order. Replaying a seed therefore
//! replays a whole query stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Deterministic stream of standard normal draws.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    seed: u64,
    rng: ChaCha20Rng,
    draws: u64,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        NoiseSource {
            seed,
            rng: ChaCha20Rng::seed_from_u64(seed),
            draws: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of normal samples drawn so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.draws += 1;
        self.rng.sample(StandardNormal)
    }

    /// One sample from `N(0, sigma^2)`.
    pub fn gaussian(&mut self, sigma: f64) -> f64 {
        sigma * self.standard_normal()
    }
}

/// Releases `max(true_count + N(0, sigma1^2), floor)`.
///
/// The result stays real-valued; it only ever feeds variances and caps.
pub fn noisy_count(true_count: usize, sigma1: f64, floor: f64, src: &mut NoiseSource) -> f64 {
    let k = true_count as f64 + src.gaussian(sigma1);
    k.max(floor)
}

/// Adds i.i.d. `N(0, variance)` to each vote and returns the index of the
/// largest coordinate (lowest index on ties).
pub fn noisy_argmax(votes: &[f64], variance: f64, src: &mut NoiseSource) -> Result<usize> {
    if votes.is_empty() {
        return Err(Error::Empty("vote vector"));
    }
    if !(variance >= 0.0 && variance.is_finite()) {
        return Err(Error::param("variance", format!("must be finite and >= 0, got {variance}")));
    }
    let sd = variance.sqrt();
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (j, v) in votes.iter().enumerate() {
        let noisy = v + src.gaussian(sd);
        if noisy > best_val {
            best = j;
            best_val = noisy;
        }
    }
    Ok(best)
}
