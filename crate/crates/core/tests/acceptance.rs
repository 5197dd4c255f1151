//! Acceptance suite. Each test prints one `PASS`/`FAIL` line to stderr
//! (uncaptured, so it shows in normal `cargo test` output) and then asserts.
//! Tests hold a shared lock so the timed ones do not compete for cores.

mod common;

use std::collections::BTreeSet;
use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use common::{exact_threshold_vote, RefKernel, Reference};
use indknn::accounting::{classical_bound, oracle_compose, Budget, ChargeRecord};
use indknn::baseline::{naive_knn_accounting, naive_knn_capacity};
use indknn::experiment::{
    median, nonprivate_tau_scan, pick_tau_star, run_experiment, run_experiment_with, sweep_with, ExperimentSpec,
    Mode, MutationPlan, SweepSpec,
};
use indknn::lsh::{answer_query_hashed, neighbor_recall};
use indknn::mechanisms::noisy_argmax;
use indknn::synth::{generate_synthetic, SynthParams, SyntheticData};
use indknn::*;

static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: u32, name: &str, ok: bool, detail: String) {
    let line = format!(
        "criterion {n:>2} [{}] {name}: {detail}\n",
        if ok { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

fn dp(eps: f64, delta: f64) -> DpParams {
    DpParams::new(eps, delta).unwrap()
}

fn rows(d: &SyntheticData) -> Vec<(Vec<f64>, u32)> {
    d.train.iter().map(|(f, l)| (f.as_slice().to_vec(), *l)).collect()
}

fn ref_kernel(k: KernelSpec) -> RefKernel {
    match k {
        KernelSpec::Cosine => RefKernel::Cosine,
        KernelSpec::Rbf { bandwidth } => RefKernel::Rbf(bandwidth),
    }
}

fn private_remaining(store: &ExampleStore) -> Vec<(ExampleId, f64)> {
    store
        .ids()
        .iter()
        .zip(store.ledger().entries())
        .filter_map(|(id, b)| match b {
            Budget::Limited(z) => Some((*id, *z)),
            Budget::Unlimited => None,
        })
        .collect()
}

struct RandomRun {
    data: SyntheticData,
    config: EngineConfig,
    hashed: bool,
    seed: u64,
}

fn random_run(rng: &mut ChaCha20Rng, max_n: usize, max_t: usize) -> RandomRun {
    let classes = rng.random_range(2..=5);
    let dim = rng.random_range(3..=12);
    let n = rng.random_range(classes..=max_n);
    let t = rng.random_range(1..=max_t);
    let data = generate_synthetic(&SynthParams {
        classes,
        n,
        dim,
        separation: rng.random_range(0.3..1.4),
        noise: rng.random_range(0.05..0.6),
        queries: t,
        seed: rng.random(),
    })
    .unwrap();
    let mut config = EngineConfig::new(dp(rng.random_range(0.1..4.0), 1e-5), t);
    config.kernel = if rng.random_bool(0.5) {
        KernelSpec::Cosine
    } else {
        KernelSpec::Rbf { bandwidth: rng.random_range(0.5..3.0) }
    };
    config.tau = rng.random_range(0.0..0.95);
    config.sigma2 = rng.random_range(0.05..2.0);
    if rng.random_bool(0.3) {
        config.sigma1 = Some(rng.random_range(0.5..20.0));
    }
    if rng.random_bool(0.3) {
        config.budget_override = Some(rng.random_range(1e-4..0.5));
    }
    config.reuse_predictions = rng.random_bool(0.3);
    RandomRun {
        data,
        config,
        hashed: rng.random_bool(0.25),
        seed: rng.random(),
    }
}

/// Answers every query of `run`, returning the store and all charges.
fn play(run: &RandomRun) -> (ExampleStore, Vec<ChargeRecord>, Vec<QueryOutcome>) {
    let mut store = run.data.store(run.config.clone()).unwrap();
    if run.hashed {
        store.attach_index(6, 4, run.seed).unwrap();
    }
    let mut src = NoiseSource::new(run.seed);
    let mut charges = Vec::new();
    let mut outs = Vec::new();
    for (q, _) in &run.data.queries {
        let out = if run.hashed {
            answer_query_hashed(&mut store, q, &mut src).unwrap()
        } else {
            store.answer_query(q, &mut src).unwrap()
        };
        charges.extend(out.charges.iter().copied());
        outs.push(out);
    }
    (store, charges, outs)
}

#[test]
fn c01_budget_safety() {
    let _g = serial();
    let started = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(0xB0D6E7);
    let mut violations = 0;
    let mut worst = f64::INFINITY;
    for _ in 0..200 {
        let run = random_run(&mut rng, 500, 100);
        let (store, _, _) = play(&run);
        let b = store.budget().0;
        for (_, z) in private_remaining(&store) {
            worst = worst.min(z);
            if !(z >= -1e-9 && z <= b) {
                violations += 1;
            }
        }
    }
    let elapsed = started.elapsed();
    let ok = violations == 0 && elapsed < Duration::from_secs(30);
    verdict(
        1,
        "budget safety",
        ok,
        format!("200 runs, {violations} out-of-range budgets, min z {worst:.3e}, {elapsed:.2?}"),
    );
    assert!(ok);
}

#[test]
fn c02_accounting_oracle_equivalence() {
    let _g = serial();
    let started = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(0x0AC1E);
    let mut max_err: f64 = 0.0;
    let mut ref_mismatch = 0;
    for _ in 0..50 {
        let mut run = random_run(&mut rng, 50, 20);
        run.hashed = false;
        let (store, charges, outs) = play(&run);
        let b = store.budget().0;
        let composed = oracle_compose(&charges);
        for (id, z) in private_remaining(&store) {
            let spent = composed.get(&id).copied().unwrap_or(0.0);
            max_err = max_err.max((spent - (b - z)).abs());
        }
        // The brute-force reference must agree on every answer and budget.
        let mut r = Reference::new(
            &rows(&run.data),
            run.data.params.classes,
            b,
            ref_kernel(run.config.kernel),
            run.config.tau,
            store.sigma1(),
            run.config.sigma2,
        );
        r.reuse = run.config.reuse_predictions;
        let mut src = NoiseSource::new(run.seed);
        for ((q, _), out) in run.data.queries.iter().zip(&outs) {
            if r.query(q.as_slice(), &mut src).answer != out.answer {
                ref_mismatch += 1;
            }
        }
        for (i, (_, z)) in private_remaining(&store).iter().enumerate() {
            if (r.z[i].unwrap() - z).abs() > 1e-9 {
                ref_mismatch += 1;
            }
        }
    }
    let elapsed = started.elapsed();
    let ok = max_err <= 1e-9 && ref_mismatch == 0 && elapsed < Duration::from_secs(10);
    verdict(
        2,
        "accounting oracle equivalence",
        ok,
        format!("50 runs, max |compose - (B - z)| = {max_err:.2e}, reference mismatches {ref_mismatch}, {elapsed:.2?}"),
    );
    assert!(ok);
}

#[test]
fn c03_zero_loss_locality() {
    let _g = serial();
    let mut rng = ChaCha20Rng::seed_from_u64(0x10CA1);
    let mut failures = Vec::new();
    for trial in 0..20 {
        let mut run = random_run(&mut rng, 200, 60);
        run.hashed = false;
        run.config.reuse_predictions = false;
        // Half the trials run with budgets nobody can exhaust, so the
        // replay must reproduce the selected sets exactly.
        let ample = trial % 2 == 0;
        if ample {
            run.config.budget_override = Some(1e12);
            run.config.sigma1 = Some(1.0);
        }
        let (store, _, outs) = play(&run);
        let b = store.budget().0;
        let ever: BTreeSet<ExampleId> = outs.iter().flat_map(|o| o.selected.iter().copied()).collect();
        for (id, z) in private_remaining(&store) {
            if !ever.contains(&id) && z.to_bits() != b.to_bits() {
                failures.push(format!("trial {trial}: unselected {id} has z = {z}"));
            }
        }

        let j = ExampleId(rng.random_range(0..run.data.train.len() as u64));
        let mut with = run.data.store(run.config.clone()).unwrap();
        let mut without = run.data.store(run.config.clone()).unwrap();
        without.remove_example(j).unwrap();
        let (mut s1, mut s2) = (NoiseSource::new(run.seed), NoiseSource::new(run.seed));
        let threshold = with.count_charge();
        for (t, (q, _)) in run.data.queries.iter().enumerate() {
            let active = |s: &ExampleStore| -> BTreeSet<ExampleId> {
                s.ids()
                    .iter()
                    .zip(s.ledger().entries())
                    .filter(|(_, b)| b.remaining().is_none_or(|z| z >= threshold))
                    .map(|(id, _)| *id)
                    .collect()
            };
            let (a1, a2) = (active(&with), active(&without));
            let o1 = with.answer_query(q, &mut s1).unwrap();
            let o2 = without.answer_query(q, &mut s2).unwrap();
            let sel1: BTreeSet<ExampleId> = o1.selected.iter().copied().filter(|&i| i != j).collect();
            let sel2: BTreeSet<ExampleId> = o2.selected.iter().copied().collect();
            if ample && sel1 != sel2 {
                failures.push(format!("trial {trial}, query {t}: selected sets differ"));
            }
            // An example active in both runs makes the same decision in both.
            for i in sel1.symmetric_difference(&sel2) {
                if a1.contains(i) && a2.contains(i) {
                    failures.push(format!("trial {trial}, query {t}: {i} decided differently"));
                }
            }
        }
    }
    let ok = failures.is_empty();
    verdict(
        3,
        "zero-loss locality",
        ok,
        if ok { "20 trials, exact".into() } else { failures[..failures.len().min(3)].join("; ") },
    );
    assert!(ok, "{failures:?}");
}

#[test]
fn c04_noiseless_limit() {
    let _g = serial();
    let data = generate_synthetic(&SynthParams {
        classes: 5,
        n: 2000,
        dim: 16,
        separation: 1.0,
        noise: 0.2,
        queries: 500,
        seed: 4,
    })
    .unwrap();
    let train = rows(&data);
    let tau = 0.5;

    let mut agree = [0usize; 2];
    let mut exact_agree = 0;
    let mut exact_defined = 0;
    for (case, budget) in [1e6, 1e24].into_iter().enumerate() {
        let mut cfg = EngineConfig::new(dp(1.0, 1e-5), 500);
        cfg.sigma1 = Some(1e-9);
        cfg.sigma2 = 1e-9;
        cfg.tau = tau;
        cfg.budget_override = Some(budget);
        let mut store = data.store(cfg).unwrap();
        let qs: Vec<&FeatureVector> = data.queries.iter().map(|(q, _)| q).collect();
        let outs = store.answer_stream(qs.iter().copied(), &mut NoiseSource::new(44)).unwrap();

        let mut r = Reference::new(&train, 5, budget, RefKernel::Cosine, tau, 1e-9, 1e-9);
        let mut src = NoiseSource::new(44);
        for ((q, _), out) in data.queries.iter().zip(&outs) {
            if r.query(q.as_slice(), &mut src).answer == out.answer {
                agree[case] += 1;
            }
            if case == 1 {
                if let Some(a) = exact_threshold_vote(&train, 5, RefKernel::Cosine, tau, q.as_slice()) {
                    exact_defined += 1;
                    exact_agree += (a == out.answer) as usize;
                }
            }
        }
    }
    let ok = agree == [500, 500] && exact_agree == exact_defined && exact_defined == 500;
    verdict(
        4,
        "noiseless-limit equivalence",
        ok,
        format!(
            "B=1e6: {}/500 vs reference; B=1e24: {}/500 vs reference, {exact_agree}/{exact_defined} vs exact threshold voting",
            agree[0], agree[1]
        ),
    );
    assert!(ok);
}

#[test]
fn c05_conversion() {
    let _g = serial();
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let mut bound_violations = 0;
    for _ in 0..1000 {
        let b = 10f64.powf(rng.random_range(-6.0..3.0));
        let delta = 10f64.powf(rng.random_range(-12.0..-2.0));
        let eps = rdp_to_dp(RdpBudget(b), delta).unwrap();
        if eps > classical_bound(RdpBudget(b), delta) * (1.0 + 1e-12) {
            bound_violations += 1;
        }
    }
    let mut max_rt: f64 = 0.0;
    for _ in 0..200 {
        let eps = rng.random_range(0.05..10.0);
        let delta = 10f64.powf(rng.random_range(-10.0..-3.0));
        let b = budget_for_dp(&dp(eps, delta));
        max_rt = max_rt.max((rdp_to_dp(b, delta).unwrap() - eps).abs());
    }
    let bs: Vec<f64> = (0..200).map(|k| 1e-5 * 1.08f64.powi(k)).collect();
    let deltas: Vec<f64> = (1..=12).map(|k| 10f64.powi(-k)).collect();
    let mut monotone = true;
    for &delta in &deltas {
        let e: Vec<f64> = bs.iter().map(|&b| rdp_to_dp(RdpBudget(b), delta).unwrap()).collect();
        monotone &= e.windows(2).all(|w| w[1] >= w[0]);
    }
    for &b in &bs {
        // smaller delta, larger epsilon
        let e: Vec<f64> = deltas.iter().map(|&d| rdp_to_dp(RdpBudget(b), d).unwrap()).collect();
        monotone &= e.windows(2).all(|w| w[1] >= w[0]);
    }
    let ok = bound_violations == 0 && max_rt <= 1e-6 && monotone;
    verdict(
        5,
        "conversion correctness",
        ok,
        format!("bound violations {bound_violations}/1000, max round-trip error {max_rt:.2e}, monotone {monotone}"),
    );
    assert!(ok);
}

#[test]
fn c06_noisy_argmax_calibration() {
    let _g = serial();
    let mut src = NoiseSource::new(6);
    let n = 10_000;
    let zeros = (0..n)
        .filter(|_| noisy_argmax(&[1.0, 0.0], 1.0, &mut src).unwrap() == 0)
        .count();
    let freq = zeros as f64 / n as f64;
    // P(1 + e0 > e1) with e0 - e1 ~ N(0, 2)
    let expect = Normal::new(0.0, 1.0).unwrap().cdf(1.0 / 2f64.sqrt());

    let c = 5;
    let mut counts = vec![0f64; c];
    for _ in 0..n {
        counts[noisy_argmax(&vec![0.3; c], 1.0, &mut src).unwrap()] += 1.0;
    }
    let e = n as f64 / c as f64;
    let chi2: f64 = counts.iter().map(|o| (o - e) * (o - e) / e).sum();
    let p = 1.0 - ChiSquared::new((c - 1) as f64).unwrap().cdf(chi2);
    let ok = (freq - expect).abs() <= 0.02 && p > 0.01;
    verdict(
        6,
        "noisy-argmax calibration",
        ok,
        format!("class-0 frequency {freq:.4} (expected {expect:.4}), uniformity chi2 {chi2:.2} p = {p:.3}"),
    );
    assert!(ok);
}

fn benchmark_spec(seed: u64) -> ExperimentSpec {
    let engine = EngineConfig::new(dp(1.0, 1e-5), 300);
    let mut spec = ExperimentSpec::synthetic(engine, SynthParams::default());
    spec.validation_queries = 300;
    spec.seed = seed;
    spec
}

#[test]
fn c07_synthetic_benchmark() {
    let _g = serial();
    let started = Instant::now();
    let mut spec = benchmark_spec(7);
    let data = spec.data.load().unwrap();

    // Generator difficulty: non-private Ind-KNN (sigma -> 0+) on held-out queries.
    let taus: Vec<f64> = (1..=19).map(|k| k as f64 * 0.05).collect();
    let scan = nonprivate_tau_scan(&spec.engine.kernel, &data, &data.pool[..300], &taus);
    let tau_np = pick_tau_star(&scan).unwrap();
    let mut np = spec.clone();
    np.repeats = 1;
    np.engine.sigma1 = Some(1e-9);
    np.engine.sigma2 = 1e-9;
    np.engine.budget_override = Some(1e24);
    np.engine.tau = tau_np;
    let nonprivate = run_experiment_with(&np, &data).unwrap().median_accuracy.unwrap();

    let sweep = sweep_with(&SweepSpec::new(spec.clone(), vec![1.0]), &data).unwrap();
    let best = sweep.per_epsilon[0].best;
    spec.engine.sigma2 = best.sigma2;
    spec.engine.tau = best.tau;
    let report = run_experiment_with(&spec, &data).unwrap();
    let acc = report.median_accuracy.unwrap();
    let elapsed = started.elapsed();
    let ok = nonprivate >= 0.98 && acc >= 0.90 && report.converted_epsilon <= 1.0 && elapsed < Duration::from_secs(60);
    verdict(
        7,
        "synthetic privacy-utility benchmark",
        ok,
        format!(
            "non-private {nonprivate:.4}; swept sigma2={} tau={}; median private accuracy {acc:.4} over 5 runs; eps {:.4}; {elapsed:.2?}",
            best.sigma2, best.tau, report.converted_epsilon
        ),
    );
    assert!(ok);
}

#[test]
fn c08_composition_growth() {
    let _g = serial();
    let spec = benchmark_spec(8);
    let data = spec.data.load().unwrap();
    let mut cfg = spec.engine.clone();
    cfg.sigma2 = 0.9;
    cfg.tau = 0.7;
    let mut store = data.store(cfg.clone()).unwrap();
    let b = store.budget().0;
    let delta = cfg.dp.delta;
    let mut src = NoiseSource::new(8);
    let mut ks = Vec::new();
    let mut ind_eps_max: f64 = 0.0;
    for (q, _) in data.pool[300..600].iter() {
        ks.push(store.answer_query(q, &mut src).unwrap().k_t);
        // The worst-off example's spend converts to at most the target.
        let worst = store.ledger().spent().fold(0.0, f64::max);
        ind_eps_max = ind_eps_max.max(rdp_to_dp(RdpBudget(worst.min(b)), delta).unwrap());
        assert!(worst <= b + 1e-12);
    }
    // Same per-query vote noise as Ind-KNN at its typical neighbor count.
    let sigma = cfg.sigma2 * median(&ks).unwrap().sqrt();
    let capacity = naive_knn_capacity(1.0, sigma, delta).unwrap();
    let eps_at_300 = naive_knn_accounting(300, sigma, delta).unwrap();
    let ok = capacity < 300 && eps_at_300 > 1.0 && ind_eps_max <= 1.0 + 1e-9;
    verdict(
        8,
        "composition-growth contrast",
        ok,
        format!(
            "baseline sigma {sigma:.2} exhausts eps=1 after {capacity} queries (eps {eps_at_300:.2} at T=300); Ind-KNN max converted eps {ind_eps_max:.4} over 300 queries"
        ),
    );
    assert!(ok);
}

#[test]
fn c09_lsh_fidelity_and_speed() {
    let _g = serial();
    let started = Instant::now();
    let data = generate_synthetic(&SynthParams {
        classes: 20,
        n: 100_000,
        dim: 64,
        separation: 1.2,
        noise: 0.075,
        queries: 200,
        seed: 9,
    })
    .unwrap();
    let mut cfg = EngineConfig::new(dp(1.0, 1e-5), 200);
    cfg.tau = 0.8;
    cfg.budget_override = Some(1e9);
    cfg.sigma1 = Some(1.0);
    let mut exact = data.store(cfg).unwrap();
    exact.attach_index(30, 8, 99).unwrap();
    let recalls: Vec<f64> = data
        .queries
        .iter()
        .filter_map(|(q, _)| neighbor_recall(&exact, q).unwrap())
        .collect();
    let recall = median(&recalls).unwrap();

    let mut hashed = exact.clone();
    let (mut s1, mut s2) = (NoiseSource::new(1), NoiseSource::new(1));
    let (mut te, mut th) = (Vec::new(), Vec::new());
    for (q, _) in &data.queries {
        let t = Instant::now();
        exact.answer_query(q, &mut s1).unwrap();
        te.push(t.elapsed().as_secs_f64());
        let t = Instant::now();
        answer_query_hashed(&mut hashed, q, &mut s2).unwrap();
        th.push(t.elapsed().as_secs_f64());
    }
    let (me, mh) = (median(&te).unwrap(), median(&th).unwrap());
    let elapsed = started.elapsed();
    let ok = recall >= 0.9 && mh <= me / 3.0 && elapsed < Duration::from_secs(300);
    verdict(
        9,
        "LSH fidelity and speed",
        ok,
        format!(
            "median recall {recall:.4} over {} queries; median latency exhaustive {:.0} us, hashed {:.0} us (ratio {:.3}); {elapsed:.2?}",
            recalls.len(),
            me * 1e6,
            mh * 1e6,
            mh / me
        ),
    );
    assert!(ok);
}

#[test]
fn c10_prediction_reuse() {
    let _g = serial();
    let mut spec = benchmark_spec(10);
    spec.validation_queries = 0;
    spec.engine.sigma2 = 0.5;
    spec.engine.tau = 0.7;
    spec.repeats = 5;
    let data = spec.data.load().unwrap();
    let off = run_experiment_with(&spec, &data).unwrap();
    spec.engine.reuse_predictions = true;
    let on = run_experiment_with(&spec, &data).unwrap();
    let retired_frac: Vec<f64> = off
        .runs
        .iter()
        .map(|r| r.retired as f64 / r.private_examples as f64)
        .collect();
    let (a_off, a_on) = (off.median_late_accuracy.unwrap(), on.median_late_accuracy.unwrap());
    let ok = retired_frac.iter().all(|&f| f > 0.5) && a_on > a_off;
    verdict(
        10,
        "prediction reuse",
        ok,
        format!(
            "retired fraction (reuse off) min {:.3}; late-half median accuracy off {a_off:.4}, on {a_on:.4}",
            retired_frac.iter().copied().fold(1.0, f64::min)
        ),
    );
    assert!(ok);
}

#[test]
fn c11_mutation_stream() {
    let _g = serial();
    let params = SynthParams { queries: 600, ..SynthParams::default() };
    let data = generate_synthetic(&params).unwrap();
    let mut cfg = EngineConfig::new(dp(1.0, 1e-5), 500);
    cfg.sigma2 = 0.9;
    cfg.tau = 0.7;
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let mut remove_at: Vec<usize> = (0..20).map(|_| rng.random_range(0..500)).collect();
    let mut insert_at: Vec<usize> = (0..20).map(|_| rng.random_range(0..500)).collect();
    remove_at.sort();
    insert_at.sort();
    let queries = &data.queries[..500];
    let inserts = &data.queries[500..520];

    let run = |mutate: bool| {
        let mut store = data.store(cfg.clone()).unwrap();
        let mut src = NoiseSource::new(111);
        let mut lat = Vec::new();
        let mut charges = Vec::new();
        let mut selected = BTreeSet::new();
        let mut removed = Vec::new();
        let (mut ri, mut ii) = (0, 0);
        for (t, (q, _)) in queries.iter().enumerate() {
            if mutate {
                while ri < 20 && remove_at[ri] == t {
                    let victim = ExampleId(rng_pick(ri as u64, &store));
                    store.remove_example(victim).unwrap();
                    removed.push(victim);
                    ri += 1;
                }
                while ii < 20 && insert_at[ii] == t {
                    let (f, l) = &inserts[ii];
                    store.add_example(LabeledExample::private(f.clone(), *l)).unwrap();
                    ii += 1;
                }
            }
            let start = Instant::now();
            let out = store.answer_query(q, &mut src).unwrap();
            lat.push(start.elapsed().as_secs_f64());
            selected.extend(out.selected.iter().copied());
            charges.extend(out.charges);
        }
        (store, lat, charges, selected, removed)
    };
    // warm-up, then measure each variant
    let _ = run(false);
    let (_, base_lat, _, _, _) = run(false);
    let (store, mut_lat, charges, selected, removed) = run(true);

    let b = store.budget().0;
    let bounds = store.ledger().check_bounds().is_ok()
        && private_remaining(&store).iter().all(|&(_, z)| z >= -1e-9 && z <= b);
    let composed = oracle_compose(&charges);
    let mut compose_err: f64 = 0.0;
    let mut untouched_ok = true;
    for (id, z) in private_remaining(&store) {
        compose_err = compose_err.max((composed.get(&id).copied().unwrap_or(0.0) - (b - z)).abs());
        if !selected.contains(&id) {
            untouched_ok &= z.to_bits() == b.to_bits();
        }
    }
    let gone = removed.iter().all(|id| store.position_of(*id).is_none());
    let grown = store.len() == data.train.len();
    let ratio = median(&mut_lat).unwrap() / median(&base_lat).unwrap();
    let ok = bounds && compose_err <= 1e-9 && untouched_ok && gone && grown && ratio <= 2.0;
    verdict(
        11,
        "mutation/unlearning stream",
        ok,
        format!(
            "20 removals + 20 insertions in 500 queries; bounds {bounds}, compose error {compose_err:.2e}, zero-loss {untouched_ok}, removed gone {gone}; latency ratio {ratio:.3}"
        ),
    );
    assert!(ok);

    // The scheduled-mutation path of the experiment runner too.
    let mut spec = ExperimentSpec::synthetic(cfg.clone(), params);
    spec.repeats = 2;
    spec.mutations = MutationPlan { removals: 20, insertions: 20 };
    let r = run_experiment(&spec).unwrap();
    assert!(r.runs.iter().all(|m| m.removals == 20 && m.insertions == 20));
}

/// Deterministic victim among the store's current original examples.
fn rng_pick(k: u64, store: &ExampleStore) -> u64 {
    let originals: Vec<u64> = store.ids().iter().map(|i| i.0).filter(|&i| i < 6000).collect();
    originals[(k as usize * 7919) % originals.len()]
}

#[test]
fn c12_determinism() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let mut identical = true;
    let mut checked = Vec::new();
    for (mode, reuse, mutations) in [
        (Mode::Exact, false, false),
        (Mode::Exact, true, true),
        (Mode::Hashed, false, true),
        (Mode::Baseline, false, false),
    ] {
        let mut engine = EngineConfig::new(dp(1.0, 1e-5), 120);
        engine.sigma2 = 0.9;
        engine.tau = 0.7;
        engine.reuse_predictions = reuse;
        let params = SynthParams { n: 1500, queries: 400, ..SynthParams::default() };
        let mut spec = ExperimentSpec::synthetic(engine, params);
        spec.seed = 12;
        spec.repeats = 3;
        spec.mode = mode;
        spec.hash.bits = 6;
        if mode == Mode::Baseline {
            spec.baseline = Some(indknn::experiment::BaselineParams { k: 15, sigma: 4.0 });
        }
        if mutations {
            spec.mutations = MutationPlan { removals: 5, insertions: 5 };
        }
        let path = dir.path().join(format!("{mode:?}-{reuse}.json"));
        spec.output = Some(path.clone());
        let mut bytes = Vec::new();
        for _ in 0..2 {
            run_experiment(&spec).unwrap();
            bytes.push(std::fs::read(&path).unwrap());
        }
        let same = bytes[0] == bytes[1];
        identical &= same;
        checked.push(format!("{mode:?}/reuse={reuse}/mut={mutations}: {}", if same { "identical" } else { "differ" }));
    }
    verdict(12, "determinism", identical, checked.join(", "));
    assert!(identical);
}
