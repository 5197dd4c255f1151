//! The Ind-KNN query loop.
//!
//! For each query `q`:
//!
//! 1. keep examples with `z_i >= 1/(2 sigma1^2)` (plus all public-reused ones);
//! 2. select those with `kernel(x_i, q) >= tau`;
//! 3. release `K = max(|selected| + N(0, sigma1^2), k_floor)`;
//! 4. for each selected private example, charge the count, cap its vote at
//!    `sigma2 * sqrt(2 K z_i)` and charge the label release;
//! 5. release `argmax(sum of votes + N(0, sigma2^2 K))`;
//! 6. optionally feed `(q, answer)` back as a public example.
//!
//! Whether example `i` is selected depends only on `x_i`, `q` and `tau`,
//! so unselected examples pay nothing.

use serde::{Deserialize, Serialize};

use crate::accounting::{is_active, Budget, ChargeRecord, IndividualLedger, RdpBudget};
use crate::error::{Error, Result};
use crate::lsh::LshIndex;
use crate::mechanisms::{noisy_argmax, noisy_count, NoiseSource};
use crate::model::{norm, EngineConfig, ExampleId, FeatureVector, LabeledExample, Origin};

const NORM_TOLERANCE: f64 = 1e-6;
const NO_POSITION: u32 = u32::MAX;

/// Everything released (or charged) for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub t: usize,
    pub answer: u32,
    pub k_t: f64,
    /// Selected examples in store order.
    pub selected: Vec<ExampleId>,
    /// One record per selected private example.
    pub charges: Vec<ChargeRecord>,
    /// Id given to `(q, answer)` when prediction reuse is on.
    pub reused_as: Option<ExampleId>,
}

/// The public part of a [`QueryOutcome`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Release {
    pub t: usize,
    pub answer: u32,
    pub k_t: f64,
}

/// Labeled examples, their ledger and the released answers.
///
/// Storage is columnar: features live in one row-major buffer so the
/// per-query scan walks contiguous memory.
#[derive(Debug, Clone)]
pub struct ExampleStore {
    config: EngineConfig,
    budget: f64,
    sigma1: f64,
    dim: usize,
    classes: usize,
    features: Vec<f64>,
    labels: Vec<u32>,
    ids: Vec<ExampleId>,
    ledger: IndividualLedger,
    id_to_pos: Vec<u32>,
    next_id: u64,
    released: Vec<Release>,
    index: Option<LshIndex>,
}

impl ExampleStore {
    /// Empty store for `dim`-dimensional features and `classes` labels.
    pub fn new(config: EngineConfig, dim: usize, classes: usize) -> Result<Self> {
        config.validate()?;
        if dim == 0 {
            return Err(Error::param("dim", "must be >= 1"));
        }
        if classes == 0 {
            return Err(Error::param("classes", "must be >= 1"));
        }
        let budget = config.budget();
        let sigma1 = config.sigma1();
        Ok(ExampleStore {
            budget: budget.0,
            sigma1,
            dim,
            classes,
            features: Vec::new(),
            labels: Vec::new(),
            ids: Vec::new(),
            ledger: IndividualLedger::new(budget),
            id_to_pos: Vec::new(),
            next_id: 0,
            released: Vec::new(),
            index: None,
            config,
        })
    }

    /// Store holding `examples` with ids `0..n`, every private entry at `z = B`.
    pub fn from_examples(
        config: EngineConfig,
        classes: usize,
        examples: impl IntoIterator<Item = LabeledExample>,
    ) -> Result<Self> {
        let mut it = examples.into_iter().peekable();
        let dim = match it.peek() {
            Some(e) => e.feature.dim(),
            None => return Err(Error::Empty("example list")),
        };
        let mut store = ExampleStore::new(config, dim, classes)?;
        for e in it {
            store.add_example(e)?;
        }
        Ok(store)
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn budget(&self) -> RdpBudget {
        RdpBudget(self.budget)
    }

    /// Resolved count-noise scale.
    pub fn sigma1(&self) -> f64 {
        self.sigma1
    }

    /// Per-query count charge `1 / (2 sigma1^2)`, also the retirement threshold.
    pub fn count_charge(&self) -> f64 {
        1.0 / (2.0 * self.sigma1 * self.sigma1)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn ledger(&self) -> &IndividualLedger {
        &self.ledger
    }

    pub fn ids(&self) -> &[ExampleId] {
        &self.ids
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn released(&self) -> &[Release] {
        &self.released
    }

    pub fn feature(&self, pos: usize) -> &[f64] {
        &self.features[pos * self.dim..(pos + 1) * self.dim]
    }

    pub fn origin(&self, pos: usize) -> Origin {
        match self.ledger.entries()[pos] {
            Budget::Limited(_) => Origin::Private,
            Budget::Unlimited => Origin::PublicReused,
        }
    }

    pub fn example(&self, pos: usize) -> LabeledExample {
        LabeledExample {
            feature: FeatureVector::from_normalized(self.feature(pos).to_vec()),
            label: self.labels[pos],
            origin: self.origin(pos),
        }
    }

    pub fn position_of(&self, id: ExampleId) -> Option<usize> {
        match self.id_to_pos.get(id.0 as usize) {
            Some(&p) if p != NO_POSITION => Some(p as usize),
            _ => None,
        }
    }

    /// Remaining budget of a private example, `None` for public or unknown ids.
    pub fn remaining(&self, id: ExampleId) -> Option<f64> {
        self.position_of(id)
            .and_then(|p| self.ledger.get(p))
            .and_then(|b| b.remaining())
    }

    pub fn index(&self) -> Option<&LshIndex> {
        self.index.as_ref()
    }

    /// Builds a sign-projection LSH index over the current contents and keeps
    /// it in sync with later mutations.
    pub fn attach_index(&mut self, tables: usize, bits: usize, seed: u64) -> Result<()> {
        let mut index = LshIndex::new(tables, bits, self.dim, seed)?;
        for pos in 0..self.len() {
            index.insert(self.ids[pos], self.feature(pos));
        }
        self.index = Some(index);
        Ok(())
    }

    pub fn detach_index(&mut self) -> Option<LshIndex> {
        self.index.take()
    }

    fn check_feature(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: f.len(),
            });
        }
        let n = norm(f);
        if n == 0.0 {
            return Err(Error::ZeroNorm { row: self.len() });
        }
        if (n - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::param("feature", format!("expected unit norm, got {n}")));
        }
        Ok(())
    }

    /// Appends an example. Private examples start at `z = B`.
    pub fn add_example(&mut self, e: LabeledExample) -> Result<ExampleId> {
        self.check_feature(e.feature.as_slice())?;
        if e.label as usize >= self.classes {
            return Err(Error::LabelOutOfRange {
                row: self.len(),
                label: e.label,
                classes: self.classes as u32,
            });
        }
        let id = ExampleId(self.next_id);
        self.next_id += 1;
        let pos = self.len();
        if pos >= NO_POSITION as usize {
            return Err(Error::param("store", "too many examples"));
        }
        self.features.extend_from_slice(e.feature.as_slice());
        self.labels.push(e.label);
        self.ids.push(id);
        match e.origin {
            Origin::Private => self.ledger.push_private(),
            Origin::PublicReused => self.ledger.push_public(),
        }
        self.id_to_pos.push(pos as u32);
        if let Some(index) = self.index.as_mut() {
            index.insert(id, e.feature.as_slice());
        }
        Ok(id)
    }

    /// Deletes an example and its ledger entry. Released answers are kept.
    pub fn remove_example(&mut self, id: ExampleId) -> Result<LabeledExample> {
        let pos = self.position_of(id).ok_or(Error::UnknownExample(id.0))?;
        let removed = self.example(pos);
        if let Some(index) = self.index.as_mut() {
            index.remove(id, &self.features[pos * self.dim..(pos + 1) * self.dim]);
        }
        self.features.drain(pos * self.dim..(pos + 1) * self.dim);
        self.labels.remove(pos);
        self.ids.remove(pos);
        self.ledger.remove(pos);
        self.id_to_pos[id.0 as usize] = NO_POSITION;
        for (p, later) in self.ids.iter().enumerate().skip(pos) {
            self.id_to_pos[later.0 as usize] = p as u32;
        }
        Ok(removed)
    }

    /// Positions that pass the active filter and the kernel threshold, with
    /// their kernel weights, in store order.
    pub fn select_neighbors(&self, q: &FeatureVector) -> Result<(Vec<usize>, Vec<f64>)> {
        self.check_query(q.as_slice())?;
        let mut pos = Vec::new();
        let mut w = Vec::new();
        self.scan_all(q.as_slice(), |p, k| {
            pos.push(p);
            w.push(k);
        });
        Ok((pos, w))
    }

    fn check_query(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: q.len(),
            });
        }
        let n = norm(q);
        if !((n - 1.0).abs() <= NORM_TOLERANCE) {
            return Err(Error::param("query", format!("expected unit norm, got {n}")));
        }
        Ok(())
    }

    #[inline]
    fn scan_all(&self, q: &[f64], mut on_selected: impl FnMut(usize, f64)) {
        let threshold = self.count_charge();
        let tau = self.config.tau;
        let kernel = self.config.kernel;
        let entries = self.ledger.entries();
        for (p, x) in self.features.chunks_exact(self.dim).enumerate() {
            if !is_active(&entries[p], threshold) {
                continue;
            }
            let k = kernel.weight(x, q);
            if k >= tau {
                on_selected(p, k);
            }
        }
    }

    fn scan_candidates(&self, q: &[f64], candidates: &[usize], mut on_selected: impl FnMut(usize, f64)) {
        let threshold = self.count_charge();
        let tau = self.config.tau;
        let kernel = self.config.kernel;
        let entries = self.ledger.entries();
        for (i, &p) in candidates.iter().enumerate() {
            if let Some(&ahead) = candidates.get(i + PREFETCH_DISTANCE) {
                prefetch_row(&self.features[ahead * self.dim..(ahead + 1) * self.dim]);
            }
            if !is_active(&entries[p], threshold) {
                continue;
            }
            let k = kernel.weight(self.feature(p), q);
            if k >= tau {
                on_selected(p, k);
            }
        }
    }

    /// Answers one query against every example in the store.
    pub fn answer_query(&mut self, q: &FeatureVector, src: &mut NoiseSource) -> Result<QueryOutcome> {
        self.check_query(q.as_slice())?;
        let mut selected = Vec::new();
        self.scan_all(q.as_slice(), |p, k| selected.push((p, k)));
        self.release(q, selected, src)
    }

    /// Answers one query restricted to the given candidate positions, which
    /// must be sorted and free of duplicates.
    pub fn answer_query_among(
        &mut self,
        q: &FeatureVector,
        candidates: &[usize],
        src: &mut NoiseSource,
    ) -> Result<QueryOutcome> {
        self.check_query(q.as_slice())?;
        debug_assert!(candidates.windows(2).all(|w| w[0] < w[1]));
        let mut selected = Vec::new();
        self.scan_candidates(q.as_slice(), candidates, |p, k| selected.push((p, k)));
        self.release(q, selected, src)
    }

    /// Steps 3-6 of the loop, given the selected `(position, weight)` pairs.
    fn release(
        &mut self,
        q: &FeatureVector,
        selected: Vec<(usize, f64)>,
        src: &mut NoiseSource,
    ) -> Result<QueryOutcome> {
        let t = self.released.len();
        let count_charge = self.count_charge();
        let sigma2 = self.config.sigma2;
        let k_t = noisy_count(selected.len(), self.sigma1, self.config.k_floor, src);

        let mut votes = vec![CompensatedSum::default(); self.classes];
        let mut charges = Vec::new();
        let mut selected_ids = Vec::with_capacity(selected.len());
        for &(p, w) in &selected {
            let id = self.ids[p];
            selected_ids.push(id);
            let label = self.labels[p] as usize;
            match self.ledger.entries()[p] {
                Budget::Unlimited => votes[label].add(w),
                Budget::Limited(z) => {
                    let z = z - count_charge;
                    if z < 0.0 {
                        return Err(Error::Invariant(format!(
                            "example {id} selected with z below the count charge"
                        )));
                    }
                    let (m, label_charge) = capped_release(w, k_t, z, sigma2);
                    self.ledger.set(p, z - label_charge);
                    votes[label].add(m);
                    charges.push(ChargeRecord {
                        query: t,
                        example: id,
                        count_charge,
                        label_charge,
                    });
                }
            }
        }
        let votes: Vec<f64> = votes.iter().map(CompensatedSum::value).collect();
        let answer = noisy_argmax(&votes, sigma2 * sigma2 * k_t, src)? as u32;
        self.released.push(Release { t, answer, k_t });

        let reused_as = if self.config.reuse_predictions {
            Some(self.add_example(LabeledExample {
                feature: q.clone(),
                label: answer,
                origin: Origin::PublicReused,
            })?)
        } else {
            None
        };

        Ok(QueryOutcome {
            t,
            answer,
            k_t,
            selected: selected_ids,
            charges,
            reused_as,
        })
    }

    /// Answers queries in order; each query sees the ledger left by the
    /// previous one.
    pub fn answer_stream<'a>(
        &mut self,
        queries: impl IntoIterator<Item = &'a FeatureVector>,
        src: &mut NoiseSource,
    ) -> Result<Vec<QueryOutcome>> {
        queries
            .into_iter()
            .map(|q| self.answer_query(q, src))
            .collect()
    }
}

/// Vote magnitude and label charge for an example of weight `w` whose
/// remaining budget (after the count charge) is `z`.
///
/// When the cap `sigma2 sqrt(2 K z)` binds, the charge is exactly `z`.
fn capped_release(w: f64, k_t: f64, z: f64, sigma2: f64) -> (f64, f64) {
    let cap = sigma2 * (2.0 * k_t * z).sqrt();
    if w >= cap {
        (cap, z)
    } else {
        let charge = w * w / (2.0 * sigma2 * sigma2 * k_t);
        (w, charge.min(z))
    }
}

/// One example's capped vote vector: `min(weight, sigma2 sqrt(2 K z))` at
/// `label`, zero elsewhere. `z` is the budget left after the count charge.
pub fn contribution(weight: f64, label: u32, classes: usize, k_t: f64, z: f64, sigma2: f64) -> Result<Vec<f64>> {
    if z < 0.0 {
        return Err(Error::Invariant(format!("negative remaining budget {z}")));
    }
    if !(k_t > 0.0) {
        return Err(Error::param("k_t", format!("must be positive, got {k_t}")));
    }
    if label as usize >= classes {
        return Err(Error::LabelOutOfRange {
            row: 0,
            label,
            classes: classes as u32,
        });
    }
    let (m, _) = capped_release(weight, k_t, z, sigma2);
    let mut f = vec![0.0; classes];
    f[label as usize] = m;
    Ok(f)
}

/// Remaining budget after releasing a label with contribution `f`:
/// `z - ||f||^2 / (2 sigma2^2 K)`, exactly `0` when `f` sits on the cap.
pub fn charge_label(z: f64, f: &[f64], sigma2: f64, k_t: f64) -> Result<f64> {
    if !(k_t > 0.0) {
        return Err(Error::param("k_t", format!("must be positive, got {k_t}")));
    }
    let m = norm(f);
    if m == 0.0 {
        return Ok(z);
    }
    let (_, charge) = capped_release(m, k_t, z, sigma2);
    Ok(z - charge)
}

/// Candidate rows are scattered through the feature buffer, so the hardware
/// prefetcher cannot follow them; hint a few rows ahead instead.
const PREFETCH_DISTANCE: usize = 8;

#[inline(always)]
fn prefetch_row(row: &[f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        use std::arch::x86_64::{_mm_prefetch, _MM_HINT_T0};
        for line in row.chunks(8) {
            // SAFETY: prefetching is a hint and never faults; the pointer
            // is in bounds of `row`.
            unsafe { _mm_prefetch::<_MM_HINT_T0>(line.as_ptr().cast()) };
        }
    }
    #[cfg(not(target_arch = "x86_64"))]
    let _ = row;
}

/// Neumaier summation.
#[derive(Debug, Clone, Copy, Default)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    #[inline]
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}
