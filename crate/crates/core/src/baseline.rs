//! Naive private kNN: exact top-k vote plus Gaussian noise, accounted with
//! standard (worst-case) RDP composition.
//!
//! Every query costs every example the same, so the converted epsilon grows
//! with the number of queries. Subsampling amplification is not modelled.

use serde::{Deserialize, Serialize};

use crate::accounting::{rdp_to_dp, RdpBudget};
use crate::engine::ExampleStore;
use crate::error::{Error, Result};
use crate::mechanisms::{noisy_argmax, NoiseSource};
use crate::model::{FeatureVector, KernelSpec};

/// L2 sensitivity of the top-k label histogram under add/remove: one label
/// leaves the top k and another enters.
pub const VOTE_SENSITIVITY: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NaiveKnnConfig {
    pub k: usize,
    pub sigma: f64,
    #[serde(default)]
    pub kernel: KernelSpec,
}

impl NaiveKnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::param("k", "must be >= 1"));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::param("sigma", format!("must be positive, got {}", self.sigma)));
        }
        self.kernel.validate()
    }
}

/// Positions of the `k` largest kernel weights, ties to the lower position.
pub fn top_k(store: &ExampleStore, q: &[f64], k: usize, kernel: &KernelSpec) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = (0..store.len())
        .map(|p| (kernel.weight(store.feature(p), q), p))
        .collect();
    let by_weight = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, by_weight);
        scored.truncate(k);
    }
    scored.sort_unstable_by(by_weight);
    scored.into_iter().map(|(_, p)| p).collect()
}

/// Label of `q` by noisy top-k plurality. Public-reused entries are treated
/// like any other example; the baseline has no ledger.
pub fn naive_knn_predict(
    store: &ExampleStore,
    q: &FeatureVector,
    cfg: &NaiveKnnConfig,
    src: &mut NoiseSource,
) -> Result<u32> {
    cfg.validate()?;
    if q.dim() != store.dim() {
        return Err(Error::DimensionMismatch {
            expected: store.dim(),
            actual: q.dim(),
        });
    }
    if store.len() < cfg.k {
        return Err(Error::NotEnoughExamples {
            available: store.len(),
            needed: cfg.k,
        });
    }
    let mut votes = vec![0.0; store.classes()];
    for p in top_k(store, q.as_slice(), cfg.k, &cfg.kernel) {
        votes[store.labels()[p] as usize] += 1.0;
    }
    Ok(noisy_argmax(&votes, cfg.sigma * cfg.sigma, src)? as u32)
}

/// Linear RDP coefficient after `queries` answers: `T * Delta^2 / (2 sigma^2)`.
pub fn naive_knn_rdp(queries: usize, sigma: f64) -> RdpBudget {
    RdpBudget(queries as f64 * VOTE_SENSITIVITY * VOTE_SENSITIVITY / (2.0 * sigma * sigma))
}

/// Epsilon spent by the baseline after `queries` answers at noise `sigma`.
pub fn naive_knn_accounting(queries: usize, sigma: f64, delta: f64) -> Result<f64> {
    if queries == 0 {
        return Err(Error::param("queries", "must be >= 1"));
    }
    if !(sigma > 0.0) {
        return Err(Error::param("sigma", format!("must be positive, got {sigma}")));
    }
    rdp_to_dp(naive_knn_rdp(queries, sigma), delta)
}

/// Number of queries the baseline can answer before exceeding `epsilon`.
pub fn naive_knn_capacity(epsilon: f64, sigma: f64, delta: f64) -> Result<usize> {
    let mut t = 0usize;
    // rdp_to_dp is monotone in T, so a doubling search then bisection works.
    let over = |t: usize| -> Result<bool> { Ok(naive_knn_accounting(t, sigma, delta)? > epsilon) };
    if over(1)? {
        return Ok(0);
    }
    let mut hi = 1usize;
    while !over(hi)? {
        t = hi;
        hi = hi.checked_mul(2).ok_or_else(|| Error::param("sigma", "budget never runs out"))?;
    }
    let mut lo = t;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if over(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(lo)
}
