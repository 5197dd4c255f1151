//! Experiment orchestration: repeated runs over sampled query sets, metrics,
//! and the two-stage hyper-parameter sweep.
//!
//! Every run gets its own store, ledger, noise stream and query sample, all
//! derived from the experiment seed. Runs execute in parallel and are joined
//! in run order, so a report depends only on its spec.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accounting::{rdp_to_dp, DpParams};
use crate::baseline::{naive_knn_accounting, naive_knn_capacity, naive_knn_predict, NaiveKnnConfig, VOTE_SENSITIVITY};
use crate::engine::ExampleStore;
use crate::error::{Error, Result};
use crate::io::{read_dataset, DatasetFiles};
use crate::lsh::{answer_query_hashed, DEFAULT_BITS, DEFAULT_TABLES};
use crate::mechanisms::NoiseSource;
use crate::model::{EngineConfig, ExampleId, FeatureVector, KernelSpec, LabeledExample};
use crate::synth::{generate_synthetic, SynthParams};

pub const EXPERIMENT_SCHEMA: &str = "indknn/experiment/v1";
pub const REPORT_SCHEMA: &str = "indknn/report/v1";
pub const SWEEP_SCHEMA: &str = "indknn/sweep/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Ind-KNN over the whole store.
    #[default]
    Exact,
    /// Ind-KNN over LSH candidates.
    Hashed,
    /// Naive top-k with standard composition.
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Synthetic(SynthParams),
    /// Private training set plus a pool of labeled queries.
    Files { train: DatasetFiles, queries: DatasetFiles },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HashParams {
    pub tables: usize,
    pub bits: usize,
    /// Hyperplane seed; derived from the run seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for HashParams {
    fn default() -> Self {
        HashParams {
            tables: DEFAULT_TABLES,
            bits: DEFAULT_BITS,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineParams {
    pub k: usize,
    pub sigma: f64,
}

/// Randomly scheduled unlearning traffic: `removals` deletions of original
/// private examples and `insertions` of fresh examples drawn from the unused
/// part of the query pool, at uniformly random query indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct MutationPlan {
    pub removals: usize,
    pub insertions: usize,
}

/// An explicit mutation applied just before query `at` is answered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "lowercase")]
pub enum MutationEvent {
    Remove { at: usize, id: u64 },
    Insert { at: usize, feature: Vec<f64>, label: u32 },
}

impl MutationEvent {
    pub fn at(&self) -> usize {
        match *self {
            MutationEvent::Remove { at, .. } | MutationEvent::Insert { at, .. } => at,
        }
    }
}

fn default_repeats() -> usize {
    5
}

fn default_schema() -> String {
    EXPERIMENT_SCHEMA.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    #[serde(default = "default_schema")]
    pub schema: String,
    /// Engine settings; `engine.queries` is the number of queries per run.
    pub engine: EngineConfig,
    pub data: DataSource,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
    /// Leading queries of the pool reserved for hyper-parameter search.
    #[serde(default)]
    pub validation_queries: usize,
    #[serde(default)]
    pub hash: HashParams,
    #[serde(default)]
    pub baseline: Option<BaselineParams>,
    #[serde(default)]
    pub mutations: MutationPlan,
    #[serde(default)]
    pub events: Vec<MutationEvent>,
    /// Wall-clock latencies make reports non-reproducible, so they are only
    /// collected on request.
    #[serde(default)]
    pub record_timing: bool,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn synthetic(engine: EngineConfig, params: SynthParams) -> Self {
        ExperimentSpec {
            schema: default_schema(),
            engine,
            data: DataSource::Synthetic(params),
            mode: Mode::Exact,
            repeats: default_repeats(),
            seed: 0,
            validation_queries: 0,
            hash: HashParams::default(),
            baseline: None,
            mutations: MutationPlan::default(),
            events: Vec::new(),
            record_timing: false,
            output: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != EXPERIMENT_SCHEMA {
            return Err(Error::param("schema", format!("expected {EXPERIMENT_SCHEMA}, got {}", self.schema)));
        }
        if self.repeats == 0 {
            return Err(Error::param("repeats", "must be >= 1"));
        }
        self.engine.validate()?;
        if self.mode == Mode::Baseline {
            let b = self
                .baseline
                .ok_or_else(|| Error::param("baseline", "baseline mode needs `baseline: {k, sigma}`"))?;
            NaiveKnnConfig { k: b.k, sigma: b.sigma, kernel: self.engine.kernel }.validate()?;
        }
        Ok(())
    }
}

/// Training rows and query pool in memory.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub classes: usize,
    pub train: Vec<(FeatureVector, u32)>,
    pub pool: Vec<(FeatureVector, u32)>,
}

impl DataSource {
    pub fn load(&self) -> Result<LoadedData> {
        match self {
            DataSource::Synthetic(p) => {
                let d = generate_synthetic(p)?;
                Ok(LoadedData {
                    classes: p.classes,
                    train: d.train,
                    pool: d.queries,
                })
            }
            DataSource::Files { train, queries } => {
                let t = read_dataset(train)?;
                let q = read_dataset(queries)?;
                if t.dim() != q.dim() && !q.examples.is_empty() {
                    return Err(Error::DimensionMismatch {
                        expected: t.dim(),
                        actual: q.dim(),
                    });
                }
                Ok(LoadedData {
                    classes: t.classes.max(q.classes) as usize,
                    train: t.examples,
                    pool: q.examples,
                })
            }
        }
    }
}

impl LoadedData {
    pub fn store(&self, config: EngineConfig) -> Result<ExampleStore> {
        ExampleStore::from_examples(
            config,
            self.classes,
            self.train.iter().map(|(f, l)| LabeledExample::private(f.clone(), *l)),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run: usize,
    pub seed: u64,
    pub queries: usize,
    /// `None` when no query was answered.
    pub accuracy: Option<f64>,
    /// Accuracy over the second half of the stream.
    pub late_accuracy: Option<f64>,
    pub answers: Vec<u32>,
    pub charge_records: usize,
    pub private_examples: usize,
    /// Private examples whose budget is below the count charge.
    pub retired: usize,
    pub median_spend: Option<f64>,
    pub max_spend: Option<f64>,
    /// Final remaining budgets in ten equal bins over `[0, B]`.
    pub ledger_histogram: Vec<u64>,
    pub removals: usize,
    pub insertions: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub latency: Option<LatencySummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub mean_us: f64,
    pub median_us: f64,
    pub p95_us: f64,
}

impl LatencySummary {
    pub fn from_micros(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let p95 = s[((s.len() as f64 * 0.95).ceil() as usize).clamp(1, s.len()) - 1];
        Some(LatencySummary {
            mean_us: s.iter().sum::<f64>() / s.len() as f64,
            median_us: median(&s).unwrap_or(0.0),
            p95_us: p95,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineAccounting {
    pub k: usize,
    pub sigma: f64,
    pub sensitivity: f64,
    /// Epsilon after answering every query of one run.
    pub epsilon_spent: Option<f64>,
    /// Queries answerable before the target epsilon is exceeded.
    pub capacity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: String,
    pub spec: ExperimentSpec,
    pub budget: f64,
    pub sigma1: f64,
    pub target_epsilon: f64,
    /// `(epsilon, delta)` implied by the per-example budget.
    pub converted_epsilon: f64,
    pub median_accuracy: Option<f64>,
    pub median_late_accuracy: Option<f64>,
    pub median_individual_spend: Option<f64>,
    pub runs: Vec<RunMetrics>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub baseline: Option<BaselineAccounting>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub latency: Option<LatencySummary>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Plain-text summary table.
    pub fn summary(&self) -> String {
        let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
        let mut s = format!(
            "mode={:?} T={} R={} B={:.6} sigma1={:.4} eps_target={} eps_converted={:.6}\n",
            self.spec.mode,
            self.spec.engine.queries,
            self.spec.repeats,
            self.budget,
            self.sigma1,
            self.target_epsilon,
            self.converted_epsilon
        );
        s.push_str("run  seed                  accuracy  late_acc  retired  median_spend\n");
        for r in &self.runs {
            s.push_str(&format!(
                "{:<4} {:<20}  {:<8}  {:<8}  {:<7}  {}\n",
                r.run,
                r.seed,
                fmt(r.accuracy),
                fmt(r.late_accuracy),
                r.retired,
                fmt(r.median_spend)
            ));
        }
        s.push_str(&format!(
            "median accuracy {}  late {}  spend {}\n",
            fmt(self.median_accuracy),
            fmt(self.median_late_accuracy),
            fmt(self.median_individual_spend)
        ));
        if let Some(b) = &self.baseline {
            s.push_str(&format!(
                "baseline: k={} sigma={} eps_spent={} capacity={}\n",
                b.k,
                b.sigma,
                fmt(b.epsilon_spent),
                b.capacity
            ));
        }
        if let Some(l) = &self.latency {
            s.push_str(&format!(
                "latency us: mean {:.1} median {:.1} p95 {:.1}\n",
                l.mean_us, l.median_us, l.p95_us
            ));
        }
        s
    }
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    })
}

/// splitmix64 step, for deriving independent sub-seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn scheduled_events(
    spec: &ExperimentSpec,
    data: &LoadedData,
    spare: &[usize],
    rng: &mut ChaCha20Rng,
) -> Result<Vec<MutationEvent>> {
    let t = spec.engine.queries;
    let plan = spec.mutations;
    let mut events = spec.events.clone();
    if plan.removals + plan.insertions == 0 {
        return Ok(events);
    }
    if t == 0 {
        return Err(Error::param("mutations", "scheduled mutations need at least one query"));
    }
    if plan.removals > data.train.len() {
        return Err(Error::param("mutations", "more removals than training examples"));
    }
    if plan.insertions > spare.len() {
        return Err(Error::param("mutations", "query pool too small for the requested insertions"));
    }
    let mut victims: Vec<u64> = (0..data.train.len() as u64).collect();
    victims.shuffle(rng);
    for &id in &victims[..plan.removals] {
        events.push(MutationEvent::Remove { at: rng.random_range(0..t), id });
    }
    for &p in &spare[..plan.insertions] {
        let (f, l) = &data.pool[p];
        events.push(MutationEvent::Insert {
            at: rng.random_range(0..t),
            feature: f.as_slice().to_vec(),
            label: *l,
        });
    }
    // stable: explicit events first, then removals, then insertions
    events.sort_by_key(MutationEvent::at);
    Ok(events)
}

fn apply_event(store: &mut ExampleStore, event: &MutationEvent) -> Result<()> {
    match event {
        MutationEvent::Remove { id, .. } => {
            store.remove_example(ExampleId(*id))?;
        }
        MutationEvent::Insert { feature, label, .. } => {
            store.add_example(LabeledExample::private(
                FeatureVector::from_normalized(feature.clone()),
                *label,
            ))?;
        }
    }
    Ok(())
}

fn run_once(spec: &ExperimentSpec, data: &LoadedData, run: usize) -> Result<RunMetrics> {
    let run_seed = derive_seed(spec.seed, run as u64);
    let mut rng = ChaCha20Rng::seed_from_u64(run_seed);
    let t = spec.engine.queries;

    let test: Vec<usize> = (spec.validation_queries.min(data.pool.len())..data.pool.len()).collect();
    if test.len() < t {
        return Err(Error::param(
            "queries",
            format!("{t} queries requested but the test pool holds {}", test.len()),
        ));
    }
    let mut order = test;
    order.shuffle(&mut rng);
    let (sample, spare) = order.split_at(t);
    let events = scheduled_events(spec, data, spare, &mut rng)?;

    let mut store = data.store(spec.engine.clone())?;
    if spec.mode == Mode::Hashed {
        let seed = spec.hash.seed.unwrap_or_else(|| derive_seed(run_seed, 2));
        store.attach_index(spec.hash.tables, spec.hash.bits, seed)?;
    }
    let baseline_cfg = spec.baseline.map(|b| NaiveKnnConfig {
        k: b.k,
        sigma: b.sigma,
        kernel: spec.engine.kernel,
    });
    let mut src = NoiseSource::new(derive_seed(run_seed, 1));

    let mut answers = Vec::with_capacity(t);
    let mut latencies = Vec::new();
    let mut correct = 0usize;
    let mut late_correct = 0usize;
    let mut charge_records = 0usize;
    let (mut removals, mut insertions) = (0, 0);
    let mut next_event = 0;
    for (i, &p) in sample.iter().enumerate() {
        while next_event < events.len() && events[next_event].at() <= i {
            apply_event(&mut store, &events[next_event])?;
            match events[next_event] {
                MutationEvent::Remove { .. } => removals += 1,
                MutationEvent::Insert { .. } => insertions += 1,
            }
            store.ledger().check_bounds()?;
            next_event += 1;
        }
        let (q, truth) = &data.pool[p];
        let started = spec.record_timing.then(Instant::now);
        let answer = match spec.mode {
            Mode::Exact => {
                let out = store.answer_query(q, &mut src)?;
                charge_records += out.charges.len();
                out.answer
            }
            Mode::Hashed => {
                let out = answer_query_hashed(&mut store, q, &mut src)?;
                charge_records += out.charges.len();
                out.answer
            }
            Mode::Baseline => naive_knn_predict(&store, q, baseline_cfg.as_ref().expect("validated"), &mut src)?,
        };
        if let Some(s) = started {
            latencies.push(s.elapsed().as_secs_f64() * 1e6);
        }
        answers.push(answer);
        if answer == *truth {
            correct += 1;
            if i >= t / 2 {
                late_correct += 1;
            }
        }
    }
    store.ledger().check_bounds()?;

    let budget = store.budget().0;
    let threshold = store.count_charge();
    let remaining: Vec<f64> = store.ledger().remaining().collect();
    let spends: Vec<f64> = remaining.iter().map(|z| budget - z).collect();
    let mut histogram = vec![0u64; 10];
    for z in &remaining {
        let bin = if budget > 0.0 { ((z / budget) * 10.0).floor() as isize } else { 9 };
        histogram[bin.clamp(0, 9) as usize] += 1;
    }
    let late_n = t - t / 2;
    Ok(RunMetrics {
        run,
        seed: run_seed,
        queries: t,
        accuracy: (t > 0).then(|| correct as f64 / t as f64),
        late_accuracy: (late_n > 0).then(|| late_correct as f64 / late_n as f64),
        answers,
        charge_records,
        private_examples: remaining.len(),
        retired: remaining.iter().filter(|&&z| z < threshold).count(),
        median_spend: median(&remaining).map(|m| budget - m),
        max_spend: spends.iter().copied().reduce(f64::max),
        ledger_histogram: histogram,
        removals,
        insertions,
        latency: LatencySummary::from_micros(&latencies),
    })
}

/// Runs `spec.repeats` independent runs and aggregates them. Writes the
/// report to `spec.output` when set.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<MetricsReport> {
    spec.validate()?;
    let data = spec.data.load()?;
    run_experiment_with(spec, &data)
}

/// [`run_experiment`] over already loaded data.
pub fn run_experiment_with(spec: &ExperimentSpec, data: &LoadedData) -> Result<MetricsReport> {
    spec.validate()?;
    let runs: Vec<RunMetrics> = (0..spec.repeats)
        .into_par_iter()
        .map(|r| run_once(spec, data, r))
        .collect::<Result<_>>()?;

    let budget = spec.engine.budget().0;
    let converted = rdp_to_dp(spec.engine.budget(), spec.engine.dp.delta)?;
    let baseline = match (spec.mode, spec.baseline) {
        (Mode::Baseline, Some(b)) => Some(BaselineAccounting {
            k: b.k,
            sigma: b.sigma,
            sensitivity: VOTE_SENSITIVITY,
            epsilon_spent: if spec.engine.queries > 0 {
                Some(naive_knn_accounting(spec.engine.queries, b.sigma, spec.engine.dp.delta)?)
            } else {
                None
            },
            capacity: naive_knn_capacity(spec.engine.dp.epsilon, b.sigma, spec.engine.dp.delta)?,
        }),
        _ => None,
    };
    let accs: Vec<f64> = runs.iter().filter_map(|r| r.accuracy).collect();
    let late: Vec<f64> = runs.iter().filter_map(|r| r.late_accuracy).collect();
    let spends: Vec<f64> = runs.iter().filter_map(|r| r.median_spend).collect();
    let latency = if spec.record_timing {
        let all: Vec<f64> = runs
            .iter()
            .filter_map(|r| r.latency.map(|l| l.median_us))
            .collect();
        median(&all).map(|m| {
            let means: Vec<f64> = runs.iter().filter_map(|r| r.latency.map(|l| l.mean_us)).collect();
            let p95s: Vec<f64> = runs.iter().filter_map(|r| r.latency.map(|l| l.p95_us)).collect();
            LatencySummary {
                mean_us: means.iter().sum::<f64>() / means.len() as f64,
                median_us: m,
                p95_us: median(&p95s).unwrap_or(m),
            }
        })
    } else {
        None
    };
    let report = MetricsReport {
        schema: REPORT_SCHEMA.to_string(),
        spec: spec.clone(),
        budget,
        sigma1: spec.engine.sigma1(),
        target_epsilon: spec.engine.dp.epsilon,
        converted_epsilon: converted,
        median_accuracy: median(&accs),
        median_late_accuracy: median(&late),
        median_individual_spend: median(&spends),
        runs,
        baseline,
        latency,
    };
    if let Some(path) = &spec.output {
        std::fs::write(path, report.to_json()?)?;
    }
    Ok(report)
}

/// Grids for the two-stage search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub base: ExperimentSpec,
    pub epsilons: Vec<f64>,
    #[serde(default = "default_sigma2_grid")]
    pub sigma2_grid: Vec<f64>,
    #[serde(default = "default_tau_grid")]
    pub tau_grid: Vec<f64>,
    /// Stage two scans `tau* +- tau_radius`.
    #[serde(default = "default_tau_radius")]
    pub tau_radius: f64,
    #[serde(default = "default_tau_step")]
    pub tau_step: f64,
    /// Private validation runs per grid point; the median accuracy is used.
    #[serde(default = "default_sweep_repeats")]
    pub repeats: usize,
}

fn default_sigma2_grid() -> Vec<f64> {
    (1..=9).map(|k| k as f64 / 10.0).collect()
}

fn default_tau_grid() -> Vec<f64> {
    (1..=19).map(|k| round6(k as f64 * 0.05)).collect()
}

fn default_tau_radius() -> f64 {
    0.05
}

fn default_tau_step() -> f64 {
    0.01
}

fn default_sweep_repeats() -> usize {
    1
}

impl SweepSpec {
    pub fn new(base: ExperimentSpec, epsilons: Vec<f64>) -> Self {
        SweepSpec {
            base,
            epsilons,
            sigma2_grid: default_sigma2_grid(),
            tau_grid: default_tau_grid(),
            tau_radius: default_tau_radius(),
            tau_step: default_tau_step(),
            repeats: default_sweep_repeats(),
        }
    }

    /// Stage-two thresholds around `tau_star`, clipped to `[0, 1]`.
    pub fn local_taus(&self, tau_star: f64) -> Vec<f64> {
        if self.tau_step <= 0.0 || self.tau_radius <= 0.0 {
            return vec![tau_star];
        }
        let steps = (self.tau_radius / self.tau_step).round() as i64;
        let mut taus: Vec<f64> = (-steps..=steps)
            .map(|k| round6(tau_star + k as f64 * self.tau_step))
            .filter(|t| (0.0..=1.0).contains(t))
            .collect();
        taus.dedup();
        taus
    }
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauScore {
    pub tau: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub sigma2: f64,
    pub tau: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSweep {
    pub epsilon: f64,
    pub budget: f64,
    pub points: Vec<SweepPoint>,
    pub best: SweepPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema: String,
    pub spec: SweepSpec,
    pub stage1: Vec<TauScore>,
    pub tau_star: f64,
    pub per_epsilon: Vec<EpsilonSweep>,
}

/// Non-private accuracy of threshold voting for each `tau`: the label with
/// the largest sum of kernel weights among examples with weight `>= tau`.
/// A query with no such example counts as wrong.
pub fn nonprivate_tau_scan(
    kernel: &KernelSpec,
    data: &LoadedData,
    queries: &[(FeatureVector, u32)],
    taus: &[f64],
) -> Vec<TauScore> {
    let mut correct = vec![0usize; taus.len()];
    let per_query: Vec<Vec<bool>> = queries
        .par_iter()
        .map(|(q, truth)| {
            let weights: Vec<(f64, u32)> = data
                .train
                .iter()
                .map(|(x, l)| (kernel.weight(x.as_slice(), q.as_slice()), *l))
                .collect();
            taus.iter()
                .map(|&tau| {
                    let mut votes = vec![0.0; data.classes];
                    let mut any = false;
                    for &(w, l) in &weights {
                        if w >= tau {
                            votes[l as usize] += w;
                            any = true;
                        }
                    }
                    any && argmax(&votes) == *truth as usize
                })
                .collect()
        })
        .collect();
    for row in per_query {
        for (c, ok) in correct.iter_mut().zip(row) {
            *c += ok as usize;
        }
    }
    let n = queries.len().max(1) as f64;
    taus.iter()
        .zip(correct)
        .map(|(&tau, c)| TauScore { tau, accuracy: c as f64 / n })
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Stage-one pick: the largest threshold that reaches the best non-private
/// accuracy. A larger threshold selects fewer neighbors per query, so it
/// is the cheapest point of the plateau in privacy terms.
pub fn pick_tau_star(scores: &[TauScore]) -> Option<f64> {
    let best = scores.iter().map(|s| s.accuracy).reduce(f64::max)?;
    scores
        .iter()
        .filter(|s| s.accuracy == best)
        .map(|s| s.tau)
        .reduce(f64::max)
}

/// Best point by accuracy; ties go to the larger `sigma2` (cheaper spend),
/// then to the `tau` closest to `tau_star`, then to the smaller `tau`.
pub fn pick_best(points: &[SweepPoint], tau_star: f64) -> Option<SweepPoint> {
    points.iter().copied().reduce(|a, b| {
        let key = |p: &SweepPoint| (p.accuracy, p.sigma2, -(p.tau - tau_star).abs(), -p.tau);
        if key(&b) > key(&a) {
            b
        } else {
            a
        }
    })
}

/// Private accuracy of one grid point on the validation queries.
fn validation_accuracy(
    base: &ExperimentSpec,
    data: &LoadedData,
    validation: &[(FeatureVector, u32)],
    engine: &EngineConfig,
    repeats: usize,
) -> Result<f64> {
    let t = engine.queries.min(validation.len());
    let accs = (0..repeats)
        .map(|r| {
            let mut store = data.store(engine.clone())?;
            let seed = derive_seed(base.seed ^ 0x5EED, r as u64);
            if base.mode == Mode::Hashed {
                store.attach_index(base.hash.tables, base.hash.bits, base.hash.seed.unwrap_or(seed))?;
            }
            let mut src = NoiseSource::new(seed);
            let mut correct = 0;
            for (q, truth) in &validation[..t] {
                let out = match base.mode {
                    Mode::Hashed => answer_query_hashed(&mut store, q, &mut src)?,
                    _ => store.answer_query(q, &mut src)?,
                };
                correct += (out.answer == *truth) as usize;
            }
            Ok(correct as f64 / t.max(1) as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(median(&accs).unwrap_or(0.0))
}

/// Two-stage search over `(sigma2, tau)` for every target epsilon.
pub fn sweep(spec: &SweepSpec) -> Result<SweepReport> {
    let data = spec.base.data.load()?;
    sweep_with(spec, &data)
}

pub fn sweep_with(spec: &SweepSpec, data: &LoadedData) -> Result<SweepReport> {
    spec.base.engine.kernel.validate()?;
    if spec.sigma2_grid.is_empty() || spec.tau_grid.is_empty() {
        return Err(Error::Empty("sweep grid"));
    }
    if spec.epsilons.is_empty() {
        return Err(Error::Empty("epsilon list"));
    }
    if spec.base.mode == Mode::Baseline {
        return Err(Error::param("mode", "the sweep tunes Ind-KNN; use exact or hashed mode"));
    }
    let nval = spec.base.validation_queries.min(data.pool.len());
    if nval == 0 {
        return Err(Error::param("validation_queries", "the sweep needs a validation set"));
    }
    let validation = &data.pool[..nval];

    let stage1 = nonprivate_tau_scan(&spec.base.engine.kernel, data, validation, &spec.tau_grid);
    let tau_star = pick_tau_star(&stage1).expect("non-empty grid");
    let taus = if spec.tau_grid.len() == 1 { vec![tau_star] } else { spec.local_taus(tau_star) };

    let mut per_epsilon = Vec::with_capacity(spec.epsilons.len());
    for &epsilon in &spec.epsilons {
        let dp = DpParams::new(epsilon, spec.base.engine.dp.delta)?;
        let grid: Vec<(f64, f64)> = spec
            .sigma2_grid
            .iter()
            .flat_map(|&s| taus.iter().map(move |&t| (s, t)))
            .collect();
        let points: Vec<SweepPoint> = grid
            .par_iter()
            .map(|&(sigma2, tau)| {
                let mut engine = spec.base.engine.clone();
                engine.dp = dp;
                engine.budget_override = None;
                engine.sigma1 = None;
                engine.sigma2 = sigma2;
                engine.tau = tau;
                let accuracy = validation_accuracy(&spec.base, data, validation, &engine, spec.repeats.max(1))?;
                Ok(SweepPoint { sigma2, tau, accuracy })
            })
            .collect::<Result<_>>()?;
        let best = pick_best(&points, tau_star).expect("non-empty grid");
        per_epsilon.push(EpsilonSweep {
            epsilon,
            budget: crate::accounting::budget_for_dp(&dp).0,
            points,
            best,
        });
    }
    Ok(SweepReport {
        schema: SWEEP_SCHEMA.to_string(),
        spec: spec.clone(),
        stage1,
        tau_star,
        per_epsilon,
    })
}
