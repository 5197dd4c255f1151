//! Feature vectors, labeled examples, kernels and engine configuration.
//!
//! Every feature that enters an [`ExampleStore`](crate::engine::ExampleStore)
//! is L2-normalized first; the kernels below assume unit-norm inputs.

use serde::{Deserialize, Serialize};

use crate::accounting::{budget_for_dp, DpParams, RdpBudget};
use crate::error::{Error, Result};

/// Default RBF bandwidth, `e^1.5`.
pub fn default_bandwidth() -> f64 {
    1.5f64.exp()
}

/// A unit-norm embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    /// Wraps already-normalized values. Use [`l2_normalize`] for raw input.
    pub fn from_normalized(values: Vec<f64>) -> Self {
        FeatureVector(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Eight independent accumulators so the loop vectorizes; a single running
/// sum is a latency-bound dependency chain.
#[inline]
fn sum_pairs(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for k in 0..8 {
            acc[k] += f(x[k], y[k]);
        }
    }
    let mut tail = 0.0;
    for (x, y) in ar.iter().zip(br) {
        tail += f(*x, *y);
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    sum_pairs(a, b, |x, y| x * y)
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    sum_pairs(a, b, |x, y| (x - y) * (x - y))
}

/// Scales `values` to unit L2 norm. `row` is only used to name the offending
/// row when the input has zero (or non-finite) norm.
pub fn l2_normalize(values: &[f64], row: usize) -> Result<FeatureVector> {
    let n = norm(values);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroNorm { row });
    }
    Ok(FeatureVector(values.iter().map(|x| x / n).collect()))
}

/// Stable identifier of an example inside one store. Initial rows get ids
/// `0..n` in file order; later insertions get fresh, increasing ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExampleId(pub u64);

impl std::fmt::Display for ExampleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Whether an example's budget is tracked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    Private,
    /// A released prediction fed back into the store; never charged.
    PublicReused,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub feature: FeatureVector,
    pub label: u32,
    pub origin: Origin,
}

impl LabeledExample {
    pub fn private(feature: FeatureVector, label: u32) -> Self {
        LabeledExample {
            feature,
            label,
            origin: Origin::Private,
        }
    }

    /// One-hot encoding over `classes` classes.
    pub fn one_hot(&self, classes: usize) -> Vec<f64> {
        let mut y = vec![0.0; classes];
        y[self.label as usize] = 1.0;
        y
    }
}

/// Similarity used for both neighbor selection and vote weighting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelSpec {
    /// `exp(-||x - q||^2 / bandwidth^2)`
    Rbf { bandwidth: f64 },
    /// `max(0, x . q)` on unit vectors.
    Cosine,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::Cosine
    }
}

impl KernelSpec {
    pub fn rbf_default() -> Self {
        KernelSpec::Rbf {
            bandwidth: default_bandwidth(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Rbf { bandwidth } if !(bandwidth > 0.0 && bandwidth.is_finite()) => Err(
                Error::param("bandwidth", format!("must be positive, got {bandwidth}")),
            ),
            _ => Ok(()),
        }
    }

    /// Unchecked weight in `[0, 1]`. Both slices must have the same length.
    #[inline]
    pub fn weight(&self, x: &[f64], q: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), q.len());
        match *self {
            KernelSpec::Rbf { bandwidth } => {
                (-squared_distance(x, q) / (bandwidth * bandwidth)).exp()
            }
            KernelSpec::Cosine => dot(x, q).clamp(0.0, 1.0),
        }
    }
}

/// Kernel weight between two unit vectors.
pub fn kernel_eval(spec: &KernelSpec, x: &FeatureVector, q: &FeatureVector) -> Result<f64> {
    if x.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: x.dim(),
            actual: q.dim(),
        });
    }
    Ok(spec.weight(x.as_slice(), q.as_slice()))
}

fn default_k_floor() -> f64 {
    30.0
}

/// Knobs for one Ind-KNN prediction interface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    #[serde(default)]
    pub kernel: KernelSpec,
    /// Minimum kernel weight for a neighbor to be selected.
    pub tau: f64,
    /// Count noise scale. `None` means `sqrt(T / 6B)`.
    #[serde(default)]
    pub sigma1: Option<f64>,
    /// Vote noise scale.
    pub sigma2: f64,
    /// Planned number of queries.
    pub queries: usize,
    pub dp: DpParams,
    /// Overrides the budget derived from `dp`. Used by tests and by
    /// experiments that pin B directly.
    #[serde(default)]
    pub budget_override: Option<f64>,
    #[serde(default)]
    pub reuse_predictions: bool,
    #[serde(default = "default_k_floor")]
    pub k_floor: f64,
    #[serde(default)]
    pub seed: u64,
}

impl EngineConfig {
    pub fn new(dp: DpParams, queries: usize) -> Self {
        EngineConfig {
            kernel: KernelSpec::default(),
            tau: 0.0,
            sigma1: None,
            sigma2: 0.4,
            queries,
            dp,
            budget_override: None,
            reuse_predictions: false,
            k_floor: default_k_floor(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        self.dp.validate()?;
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::param("tau", format!("must be a finite value >= 0, got {}", self.tau)));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::param("sigma2", format!("must be positive, got {}", self.sigma2)));
        }
        if let Some(s) = self.sigma1 {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::param("sigma1", format!("must be positive, got {s}")));
            }
        }
        if !(self.k_floor >= 1.0) {
            return Err(Error::param("k_floor", format!("must be >= 1, got {}", self.k_floor)));
        }
        if let Some(b) = self.budget_override {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(Error::param("budget_override", format!("must be >= 0, got {b}")));
            }
        }
        Ok(())
    }

    /// Per-example budget B.
    pub fn budget(&self) -> RdpBudget {
        match self.budget_override {
            Some(b) => RdpBudget(b),
            None => budget_for_dp(&self.dp),
        }
    }

    /// Resolved count noise scale.
    pub fn sigma1(&self) -> f64 {
        self.sigma1
            .unwrap_or_else(|| default_sigma1(self.queries, self.budget().0))
    }
}

/// `sqrt(T / 6B)`. The count charge is then `3B / T` per selection, so an
/// example can pay for the count at up to `T / 3` queries.
pub fn default_sigma1(queries: usize, budget: f64) -> f64 {
    (queries as f64 / (6.0 * budget)).sqrt()
}
