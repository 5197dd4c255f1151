//! Sign-random-projection LSH for restricting the candidate set of a query.
//!
//! Each of the `L` tables draws `b` Gaussian directions `r_j` and maps a
//! feature `mu` to the `b`-bit code whose bit `j` is set iff `r_j . mu >= 0`.
//! A query only considers examples that share its bucket in at least one
//! table. Codes depend on the hyperplanes and on the example itself, never
//! on other examples, so hashing adds no privacy cost.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::engine::{ExampleStore, QueryOutcome};
use crate::error::{Error, Result};
use crate::mechanisms::NoiseSource;
use crate::model::{dot, ExampleId, FeatureVector};

pub const DEFAULT_TABLES: usize = 30;
pub const DEFAULT_BITS: usize = 8;

#[derive(Debug, Clone)]
pub struct LshIndex {
    tables: usize,
    bits: usize,
    dim: usize,
    seed: u64,
    /// `tables * bits` rows of `dim` coordinates.
    hyperplanes: Vec<f64>,
    /// Per table, code -> ids in insertion (= ascending id) order.
    buckets: Vec<HashMap<u64, Vec<ExampleId>>>,
}

impl LshIndex {
    /// Empty index. Hyperplanes depend only on `(seed, tables, bits, dim)`.
    pub fn new(tables: usize, bits: usize, dim: usize, seed: u64) -> Result<Self> {
        if tables == 0 {
            return Err(Error::param("tables", "must be >= 1"));
        }
        if !(1..=63).contains(&bits) {
            return Err(Error::param("bits", format!("must lie in 1..=63, got {bits}")));
        }
        if dim == 0 {
            return Err(Error::param("dim", "must be >= 1"));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let hyperplanes = (0..tables * bits * dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(LshIndex {
            tables,
            bits,
            dim,
            seed,
            hyperplanes,
            buckets: vec![HashMap::new(); tables],
        })
    }

    /// Index over every example currently in `store`.
    pub fn build(store: &ExampleStore, tables: usize, bits: usize, seed: u64) -> Result<Self> {
        let mut index = LshIndex::new(tables, bits, store.dim(), seed)?;
        for (pos, &id) in store.ids().iter().enumerate() {
            index.insert(id, store.feature(pos));
        }
        Ok(index)
    }

    pub fn tables(&self) -> usize {
        self.tables
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Bucket code of `v` in `table`.
    pub fn code(&self, table: usize, v: &[f64]) -> u64 {
        debug_assert_eq!(v.len(), self.dim);
        let base = table * self.bits * self.dim;
        let mut code = 0u64;
        for j in 0..self.bits {
            let r = &self.hyperplanes[base + j * self.dim..base + (j + 1) * self.dim];
            if dot(r, v) >= 0.0 {
                code |= 1 << j;
            }
        }
        code
    }

    /// Codes of `v` in every table.
    pub fn codes(&self, v: &[f64]) -> Vec<u64> {
        (0..self.tables).map(|t| self.code(t, v)).collect()
    }

    /// Adds `id` to its bucket in every table. Ids must be inserted in
    /// increasing order.
    pub fn insert(&mut self, id: ExampleId, v: &[f64]) {
        for t in 0..self.tables {
            let code = self.code(t, v);
            let bucket = self.buckets[t].entry(code).or_default();
            debug_assert!(bucket.last().is_none_or(|last| *last < id));
            bucket.push(id);
        }
    }

    /// Drops `id` from the buckets that `v` hashes to.
    pub fn remove(&mut self, id: ExampleId, v: &[f64]) {
        for t in 0..self.tables {
            let code = self.code(t, v);
            if let Some(bucket) = self.buckets[t].get_mut(&code) {
                if let Ok(i) = bucket.binary_search(&id) {
                    bucket.remove(i);
                }
                if bucket.is_empty() {
                    self.buckets[t].remove(&code);
                }
            }
        }
    }

    /// Ids sharing a bucket with `q` in at least one table, ascending.
    pub fn retrieve(&self, q: &[f64]) -> Vec<ExampleId> {
        let hits: Vec<&[ExampleId]> = (0..self.tables)
            .filter_map(|t| self.buckets[t].get(&self.code(t, q)).map(Vec::as_slice))
            .collect();
        // Buckets overlap heavily across tables; a bitmap over ids dedups
        // and sorts in one pass.
        let max_id = hits.iter().filter_map(|b| b.last()).map(|id| id.0).max();
        let Some(max_id) = max_id else { return Vec::new() };
        let mut words = vec![0u64; (max_id / 64 + 1) as usize];
        for bucket in &hits {
            for id in *bucket {
                words[(id.0 / 64) as usize] |= 1 << (id.0 % 64);
            }
        }
        let mut out = Vec::new();
        for (w, &word) in words.iter().enumerate() {
            let mut bits = word;
            while bits != 0 {
                out.push(ExampleId(w as u64 * 64 + bits.trailing_zeros() as u64));
                bits &= bits - 1;
            }
        }
        out
    }

    /// Number of `(table, bucket)` memberships of `id`; `tables` when indexed.
    pub fn memberships(&self, id: ExampleId) -> usize {
        self.buckets
            .iter()
            .map(|t| t.values().filter(|b| b.binary_search(&id).is_ok()).count())
            .sum()
    }

    pub fn occupancy(&self) -> OccupancyReport {
        let mut per_table = Vec::with_capacity(self.tables);
        let mut histogram: Vec<u64> = Vec::new();
        for table in &self.buckets {
            let sizes: Vec<usize> = table.values().map(Vec::len).collect();
            let total: usize = sizes.iter().sum();
            for &s in &sizes {
                let bin = usize::BITS as usize - s.leading_zeros() as usize - 1;
                if histogram.len() <= bin {
                    histogram.resize(bin + 1, 0);
                }
                histogram[bin] += 1;
            }
            per_table.push(TableOccupancy {
                nonempty_buckets: sizes.len(),
                largest_bucket: sizes.iter().copied().max().unwrap_or(0),
                mean_bucket: if sizes.is_empty() { 0.0 } else { total as f64 / sizes.len() as f64 },
            });
        }
        OccupancyReport {
            tables: self.tables,
            bits: self.bits,
            seed: self.seed,
            per_table,
            size_histogram: histogram
                .into_iter()
                .enumerate()
                .map(|(bin, count)| SizeBin {
                    min_size: 1 << bin,
                    max_size: (1 << (bin + 1)) - 1,
                    buckets: count,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableOccupancy {
    pub nonempty_buckets: usize,
    pub largest_bucket: usize,
    pub mean_bucket: f64,
}

/// Buckets counted by size, in power-of-two bins over all tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeBin {
    pub min_size: usize,
    pub max_size: usize,
    pub buckets: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyReport {
    pub tables: usize,
    pub bits: usize,
    pub seed: u64,
    pub per_table: Vec<TableOccupancy>,
    pub size_histogram: Vec<SizeBin>,
}

/// Candidate positions for `q` under the store's attached index.
pub fn candidates(store: &ExampleStore, q: &[f64]) -> Result<Vec<usize>> {
    let index = store
        .index()
        .ok_or_else(|| Error::param("index", "no LSH index attached to the store"))?;
    index
        .retrieve(q)
        .into_iter()
        .map(|id| {
            store
                .position_of(id)
                .ok_or_else(|| Error::Invariant(format!("index holds removed example {id}")))
        })
        .collect()
}

/// Ind-KNN restricted to the hash candidates of `q`. Charging, capping and
/// noise are exactly those of [`ExampleStore::answer_query`].
pub fn answer_query_hashed(
    store: &mut ExampleStore,
    q: &FeatureVector,
    src: &mut NoiseSource,
) -> Result<QueryOutcome> {
    if q.dim() != store.dim() {
        return Err(Error::DimensionMismatch {
            expected: store.dim(),
            actual: q.dim(),
        });
    }
    let cands = candidates(store, q.as_slice())?;
    store.answer_query_among(q, &cands, src)
}

/// Fraction of the exhaustively selected neighbors of `q` that the index
/// retrieves. `None` when nothing is selected.
pub fn neighbor_recall(store: &ExampleStore, q: &FeatureVector) -> Result<Option<f64>> {
    let (exact, _) = store.select_neighbors(q)?;
    if exact.is_empty() {
        return Ok(None);
    }
    let cands = candidates(store, q.as_slice())?;
    let hit = exact
        .iter()
        .filter(|p| cands.binary_search(p).is_ok())
        .count();
    Ok(Some(hit as f64 / exact.len() as f64))
}
