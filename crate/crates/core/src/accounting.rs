//! Individual Rényi-DP accounting.
//!
//! Every private example starts with the same budget `B` and is charged
//! only when it takes part in a release. The engine answers a query with a
//! noisy count (charge `1 / (2 sigma1^2)` per selected example) followed by a
//! noisy label (charge `||f||^2 / (2 sigma2^2 K)`). Both mechanisms are
//! Gaussian, so each charge is the coefficient of a curve that is linear in
//! the Rényi order `alpha`, and the ledger can track a single scalar per
//! example. An example whose remaining budget drops below the count charge
//! is retired by [`filter_active`]; the whole interaction then satisfies
//! `(alpha, B alpha)`-RDP, which [`rdp_to_dp`] turns into `(epsilon, delta)`.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ExampleId;

/// Target `(epsilon, delta)` guarantee.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpParams {
    pub epsilon: f64,
    pub delta: f64,
}

impl DpParams {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        let p = DpParams { epsilon, delta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::param("epsilon", format!("must be positive, got {}", self.epsilon)));
        }
        check_delta(self.delta)
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::param("delta", format!("must lie in (0, 1), got {delta}")))
    }
}

/// Linear RDP coefficient: a mechanism with budget `B` is `(alpha, B alpha)`-RDP
/// for every `alpha >= 1`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RdpBudget(pub f64);

/// Individual RDP of one example under a Gaussian linear query:
/// `alpha * ||q(z_i)||^2 / (2 sigma^2)`.
pub fn gaussian_individual_rdp(contribution_norm: f64, sigma: f64, alpha: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::param("sigma", format!("must be positive, got {sigma}")));
    }
    if !(alpha > 1.0) {
        return Err(Error::param("alpha", format!("must exceed 1, got {alpha}")));
    }
    if !(contribution_norm >= 0.0) {
        return Err(Error::param("contribution_norm", "must be >= 0"));
    }
    Ok(alpha * contribution_norm * contribution_norm / (2.0 * sigma * sigma))
}

/// Orders used by [`rdp_to_dp`]: `1.01..=10` in steps of `0.01`, then even
/// orders up to 512, then a geometric tail up to `1e8` for very small budgets.
pub fn conversion_grid() -> &'static [f64] {
    static GRID: OnceLock<Vec<f64>> = OnceLock::new();
    GRID.get_or_init(|| {
        let mut g: Vec<f64> = (1..=900).map(|k| 1.0 + k as f64 / 100.0).collect();
        g.extend((6..=256).map(|k| 2.0 * k as f64));
        let mut a = 512.0f64;
        while a < 1e8 {
            a *= 1.25;
            g.push(a);
        }
        g
    })
}

/// `(alpha, B alpha)`-RDP implies `(eps(alpha), delta)`-DP with
/// `eps(alpha) = B alpha + log(1 / (alpha delta)) / (alpha - 1) + log(1 - 1/alpha)`.
fn conversion_at(budget: f64, delta: f64, alpha: f64) -> f64 {
    budget * alpha + (-(alpha.ln()) - delta.ln()) / (alpha - 1.0) + (-1.0 / alpha).ln_1p()
}

/// Classical conversion `B + 2 sqrt(B log(1/delta))`, an upper envelope for
/// [`rdp_to_dp`].
pub fn classical_bound(budget: RdpBudget, delta: f64) -> f64 {
    budget.0 + 2.0 * (budget.0 * (1.0 / delta).ln()).sqrt()
}

/// Smallest epsilon such that `(alpha, B alpha)`-RDP for all alpha gives
/// `(epsilon, delta)`-DP, minimized over [`conversion_grid`] plus the order
/// that minimizes the classical bound.
pub fn rdp_to_dp(budget: RdpBudget, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    let b = budget.0;
    if !(b >= 0.0 && b.is_finite()) {
        return Err(Error::param("budget", format!("must be finite and >= 0, got {b}")));
    }
    if b == 0.0 {
        return Ok(0.0);
    }
    let mut best = f64::INFINITY;
    for &alpha in conversion_grid() {
        best = best.min(conversion_at(b, delta, alpha));
    }
    // The classical bound is attained at this order; evaluating the tighter
    // form there keeps the result below it for every (B, delta).
    let classical_alpha = 1.0 + ((1.0 / delta).ln() / b).sqrt();
    if classical_alpha.is_finite() && classical_alpha > 1.0 {
        best = best.min(conversion_at(b, delta, classical_alpha));
    }
    Ok(best.max(0.0))
}

/// Largest `B` with `rdp_to_dp(B, delta) <= epsilon`, by bisection.
pub fn budget_for_dp(target: &DpParams) -> RdpBudget {
    let eps_of = |b: f64| rdp_to_dp(RdpBudget(b), target.delta).unwrap_or(f64::INFINITY);
    let mut lo = 0.0f64;
    let mut hi = target.epsilon.max(1.0);
    while eps_of(hi) <= target.epsilon {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        if hi - lo <= 1e-13 * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if eps_of(mid) <= target.epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    RdpBudget(lo)
}

/// Remaining budget of one ledger entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Budget {
    Limited(f64),
    /// Public-reused entries; never charged, never retired.
    Unlimited,
}

impl Budget {
    pub fn remaining(&self) -> Option<f64> {
        match *self {
            Budget::Limited(z) => Some(z),
            Budget::Unlimited => None,
        }
    }
}

/// Per-example remaining budgets, positionally aligned with the store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualLedger {
    initial: f64,
    entries: Vec<Budget>,
}

impl IndividualLedger {
    pub fn new(initial: RdpBudget) -> Self {
        IndividualLedger {
            initial: initial.0,
            entries: Vec::new(),
        }
    }

    /// Ledger with `n` fresh private entries.
    pub fn fresh(initial: RdpBudget, n: usize) -> Self {
        IndividualLedger {
            initial: initial.0,
            entries: vec![Budget::Limited(initial.0); n],
        }
    }

    /// Ledger from explicit entries; used to set up specific states.
    pub fn from_entries(initial: RdpBudget, entries: Vec<Budget>) -> Self {
        IndividualLedger {
            initial: initial.0,
            entries,
        }
    }

    pub fn initial(&self) -> RdpBudget {
        RdpBudget(self.initial)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn private_len(&self) -> usize {
        self.entries
            .iter()
            .filter(|b| matches!(b, Budget::Limited(_)))
            .count()
    }

    pub fn entries(&self) -> &[Budget] {
        &self.entries
    }

    pub fn get(&self, pos: usize) -> Option<Budget> {
        self.entries.get(pos).copied()
    }

    pub fn push_private(&mut self) {
        self.entries.push(Budget::Limited(self.initial));
    }

    pub fn push_public(&mut self) {
        self.entries.push(Budget::Unlimited);
    }

    pub(crate) fn remove(&mut self, pos: usize) -> Budget {
        self.entries.remove(pos)
    }

    pub(crate) fn set(&mut self, pos: usize, z: f64) {
        debug_assert!(matches!(self.entries[pos], Budget::Limited(_)));
        self.entries[pos] = Budget::Limited(z);
    }

    /// Remaining budgets of private entries, in store order.
    pub fn remaining(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().filter_map(Budget::remaining)
    }

    /// `B - z_i` for each private entry.
    pub fn spent(&self) -> impl Iterator<Item = f64> + '_ {
        self.remaining().map(move |z| self.initial - z)
    }

    /// Checks `-1e-9 <= z_i <= B + 1e-9` for every private entry.
    pub fn check_bounds(&self) -> Result<()> {
        for (pos, z) in self.entries.iter().enumerate() {
            if let Budget::Limited(z) = *z {
                if !(z >= -1e-9 && z <= self.initial + 1e-9) {
                    return Err(Error::Invariant(format!(
                        "ledger entry {pos} = {z} outside [0, {}]",
                        self.initial
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Positions whose remaining budget is at least `threshold`, plus every
/// public-reused position. The boundary is inclusive.
pub fn filter_active(ledger: &IndividualLedger, threshold: f64) -> Vec<usize> {
    ledger
        .entries
        .iter()
        .enumerate()
        .filter(|(_, b)| is_active(b, threshold))
        .map(|(i, _)| i)
        .collect()
}

#[inline]
pub(crate) fn is_active(b: &Budget, threshold: f64) -> bool {
    match *b {
        Budget::Limited(z) => z >= threshold,
        Budget::Unlimited => true,
    }
}

/// One example's charges for one query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChargeRecord {
    pub query: usize,
    pub example: ExampleId,
    /// `1 / (2 sigma1^2)` for releasing the noisy count.
    pub count_charge: f64,
    /// `||f||^2 / (2 sigma2^2 K)` for releasing the label.
    pub label_charge: f64,
}

impl ChargeRecord {
    pub fn total(&self) -> f64 {
        self.count_charge + self.label_charge
    }
}

/// Re-sums charges per example from scratch.
///
/// This is a test oracle: it shares no code with the engine's incremental
/// ledger updates and accumulates in double-double precision.
pub fn oracle_compose<'a, I>(records: I) -> BTreeMap<ExampleId, f64>
where
    I: IntoIterator<Item = &'a ChargeRecord>,
{
    let mut acc: BTreeMap<ExampleId, (f64, f64)> = BTreeMap::new();
    for r in records {
        let slot = acc.entry(r.example).or_insert((0.0, 0.0));
        for x in [r.count_charge, r.label_charge] {
            *slot = two_sum_add(*slot, x);
        }
    }
    acc.into_iter().map(|(k, (hi, lo))| (k, hi + lo)).collect()
}

/// Adds `x` to the unevaluated sum `hi + lo` without losing low-order bits.
fn two_sum_add((hi, lo): (f64, f64), x: f64) -> (f64, f64) {
    let s = hi + x;
    let bp = s - hi;
    let err = (hi - (s - bp)) + (x - bp);
    let lo = lo + err;
    let s2 = s + lo;
    (s2, lo - (s2 - s))
}
