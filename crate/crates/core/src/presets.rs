//! Tuned `(sigma2, tau)` settings for the four reference embedding datasets,
//! shipped as presets for bring-your-own-features runs.
//!
//! The RBF presets assume bandwidth `e^1.5`; the hashed presets assume 30
//! tables.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dataset {
    Cifar10,
    FashionMnist,
    AgNews,
    Dbpedia,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PresetKernel {
    Cosine,
    Rbf,
    Hash,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub dataset: Dataset,
    pub kernel: PresetKernel,
    pub epsilon: f64,
    pub sigma2: f64,
    pub tau: f64,
    /// Bits per table, hashed presets only.
    pub bits: Option<usize>,
}

const EPSILONS: [f64; 4] = [0.5, 1.0, 1.5, 2.0];

// (dataset, kernel, bits, [(sigma2, tau); 4] for EPSILONS)
#[allow(clippy::type_complexity)]
const TABLE: &[(Dataset, PresetKernel, Option<usize>, [(f64, f64); 4])] = &[
    (Dataset::Cifar10, PresetKernel::Cosine, None, [(0.7, 0.12), (0.4, 0.12), (0.4, 0.12), (0.4, 0.12)]),
    (Dataset::FashionMnist, PresetKernel::Cosine, None, [(1.3, 0.6), (0.6, 0.6), (0.3, 0.6), (0.3, 0.6)]),
    (Dataset::AgNews, PresetKernel::Cosine, None, [(0.6, 0.35), (0.4, 0.36), (0.25, 0.37), (0.2, 0.38)]),
    (Dataset::Dbpedia, PresetKernel::Cosine, None, [(0.45, 0.35), (0.3, 0.37), (0.2, 0.37), (0.1, 0.38)]),
    (Dataset::Cifar10, PresetKernel::Rbf, None, [(0.6, 0.8), (0.5, 0.25), (0.4, 0.26), (0.2, 0.28)]),
    (Dataset::FashionMnist, PresetKernel::Rbf, None, [(1.3, 0.83), (0.7, 0.82), (0.4, 0.84), (0.3, 0.84)]),
    (Dataset::Cifar10, PresetKernel::Hash, Some(8), [(0.6, 0.25), (0.4, 0.50), (0.3, 0.52), (0.2, 0.53)]),
    (Dataset::AgNews, PresetKernel::Hash, Some(9), [(0.7, 0.35), (0.4, 0.36), (0.25, 0.36), (0.2, 0.36)]),
];

pub fn all() -> Vec<Preset> {
    TABLE
        .iter()
        .flat_map(|&(dataset, kernel, bits, row)| {
            EPSILONS.iter().zip(row).map(move |(&epsilon, (sigma2, tau))| Preset {
                dataset,
                kernel,
                epsilon,
                sigma2,
                tau,
                bits,
            })
        })
        .collect()
}

pub fn lookup(dataset: Dataset, kernel: PresetKernel, epsilon: f64) -> Option<Preset> {
    all()
        .into_iter()
        .find(|p| p.dataset == dataset && p.kernel == kernel && (p.epsilon - epsilon).abs() < 1e-9)
}
