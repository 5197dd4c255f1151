use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use indknn::accounting::classical_bound;
use indknn::baseline::{naive_knn_accounting, naive_knn_capacity, naive_knn_rdp, VOTE_SENSITIVITY};
use indknn::experiment::{median, run_experiment, sweep, BaselineParams, ExperimentSpec, Mode, SweepSpec};
use indknn::io::{write_dataset, DatasetFiles};
use indknn::lsh::neighbor_recall;
use indknn::model::default_sigma1;
use indknn::synth::{generate_synthetic, SynthParams};
use indknn::{budget_for_dp, rdp_to_dp, DpParams, Error, RdpBudget};

#[derive(Parser)]
#[command(name = "indknn", version, about = "Private k-NN prediction with individual privacy accounting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file (directory for `synth`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    /// Feed released answers back as public examples.
    #[arg(long, global = true, value_enum)]
    reuse: Option<Toggle>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Run an experiment.
    Run,
    /// Two-stage search over (sigma2, tau).
    Sweep(SweepArgs),
    /// Convert between (epsilon, delta) and the per-example RDP budget.
    Account(AccountArgs),
    /// LSH bucket occupancy and neighbor recall.
    Index(IndexArgs),
    /// Accounting (and optionally a run) of the naive private k-NN baseline.
    Baseline(BaselineArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Exact,
    Hashed,
    Baseline,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Exact => Mode::Exact,
            ModeArg::Hashed => Mode::Hashed,
            ModeArg::Baseline => Mode::Baseline,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    /// Minimum angle between class means, radians.
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    /// Size of the held-out query pool.
    #[arg(long)]
    queries: Option<usize>,
    /// Write CSV instead of the binary format.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Target epsilons, used when the config is a plain experiment spec.
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,2")]
    epsilons: Vec<f64>,
}

#[derive(Args)]
struct AccountArgs {
    #[arg(long)]
    delta: f64,
    /// Target epsilon; prints the budget B.
    #[arg(long, conflicts_with = "budget")]
    epsilon: Option<f64>,
    /// Budget B; prints the epsilon it converts to.
    #[arg(long)]
    budget: Option<f64>,
    /// Planned query count; adds the default count-noise scale.
    #[arg(long)]
    queries: Option<usize>,
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long)]
    tables: Option<usize>,
    #[arg(long)]
    bits: Option<usize>,
    /// Pool queries used for the recall estimate.
    #[arg(long, default_value_t = 100)]
    queries: usize,
}

#[derive(Args)]
struct BaselineArgs {
    /// Vote noise standard deviation.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    queries: Option<usize>,
}

#[derive(Debug)]
enum CliError {
    Lib(Error),
    Usage(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Lib(e.into())
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(), // --help, --version
        Err(e) => {
            emit_error("usage", &e.to_string());
            return ExitCode::from(2);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            emit_error("usage", &m);
            ExitCode::from(2)
        }
        Err(CliError::Lib(e)) => {
            emit_error(e.kind(), &e.to_string());
            ExitCode::from(1)
        }
    }
}

/// Prints to stdout; a closed pipe (`indknn ... | head`) is not an error.
fn say(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn emit_error(kind: &str, message: &str) {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message.trim_end() } }));
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Synth(a) => synth(cli, a),
        Command::Run => run(cli),
        Command::Sweep(a) => sweep_cmd(cli, a),
        Command::Account(a) => account(cli, a),
        Command::Index(a) => index(cli, a),
        Command::Baseline(a) => baseline(cli, a),
    }
}

fn read_json(path: &Path) -> CliResult<Value> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn load_spec(cli: &Cli) -> CliResult<ExperimentSpec> {
    let path = cli.config.as_ref().ok_or_else(|| usage("--config <path> is required"))?;
    let mut spec: ExperimentSpec = serde_json::from_value(read_json(path)?)?;
    apply_overrides(cli, &mut spec);
    Ok(spec)
}

fn apply_overrides(cli: &Cli, spec: &mut ExperimentSpec) {
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    if let Some(m) = cli.mode {
        spec.mode = m.into();
    }
    if let Some(r) = cli.reuse {
        spec.engine.reuse_predictions = matches!(r, Toggle::On);
    }
    if let Some(o) = &cli.out {
        spec.output = Some(o.clone());
    }
}

/// Writes `value` to `--out` when given, else to stdout.
fn emit<T: Serialize>(cli: &Cli, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)?;
    match &cli.out {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => say(&(text + "\n")),
    }
    Ok(())
}

fn synth(cli: &Cli, a: &SynthArgs) -> CliResult<()> {
    let mut p: SynthParams = match &cli.config {
        Some(path) => serde_json::from_value(read_json(path)?)?,
        None => SynthParams::default(),
    };
    p.classes = a.classes.unwrap_or(p.classes);
    p.n = a.n.unwrap_or(p.n);
    p.dim = a.dim.unwrap_or(p.dim);
    p.separation = a.separation.unwrap_or(p.separation);
    p.noise = a.noise.unwrap_or(p.noise);
    p.queries = a.queries.unwrap_or(p.queries);
    p.seed = cli.seed.unwrap_or(p.seed);
    let data = generate_synthetic(&p)?;

    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    let files = |stem: &str| {
        let (f, l) = if a.csv {
            (format!("{stem}.features.csv"), format!("{stem}.labels.csv"))
        } else {
            (format!("{stem}.ikn"), format!("{stem}.ikl"))
        };
        DatasetFiles {
            features: dir.join(f),
            labels: dir.join(l),
            classes: Some(p.classes as u32),
        }
    };
    let (train, queries) = (files("train"), files("queries"));
    write_dataset(&train, p.classes as u32, &data.train)?;
    write_dataset(&queries, p.classes as u32, &data.queries)?;
    let summary = json!({
        "schema": "indknn/synth/v1",
        "params": p,
        "data": { "kind": "files", "train": train, "queries": queries },
    });
    say(&(serde_json::to_string_pretty(&summary)? + "\n"));
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    let spec = load_spec(cli)?;
    let report = run_experiment(&spec)?;
    if spec.output.is_some() {
        say(&report.summary());
    } else {
        eprint!("{}", report.summary());
        say(&(report.to_json()? + "\n"));
    }
    Ok(())
}

fn sweep_cmd(cli: &Cli, a: &SweepArgs) -> CliResult<()> {
    let path = cli.config.as_ref().ok_or_else(|| usage("--config <path> is required"))?;
    let value = read_json(path)?;
    let mut spec: SweepSpec = if value.get("base").is_some() {
        serde_json::from_value(value)?
    } else {
        SweepSpec::new(serde_json::from_value(value)?, a.epsilons.clone())
    };
    apply_overrides(cli, &mut spec.base);
    spec.base.output = None;
    let report = sweep(&spec)?;
    for e in &report.per_epsilon {
        eprintln!(
            "eps={} B={:.6}: sigma2={} tau={} validation accuracy {:.4}",
            e.epsilon, e.budget, e.best.sigma2, e.best.tau, e.best.accuracy
        );
    }
    emit(cli, &report)
}

fn account(cli: &Cli, a: &AccountArgs) -> CliResult<()> {
    let (epsilon, budget) = match (a.epsilon, a.budget) {
        (Some(eps), None) => {
            let b = budget_for_dp(&DpParams::new(eps, a.delta)?);
            (eps, b)
        }
        (None, Some(b)) => {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(Error::InvalidParameter { name: "budget", reason: format!("must be >= 0, got {b}") }.into());
            }
            (rdp_to_dp(RdpBudget(b), a.delta)?, RdpBudget(b))
        }
        _ => return Err(usage("give exactly one of --epsilon or --budget")),
    };
    let mut out = json!({
        "schema": "indknn/account/v1",
        "delta": a.delta,
        "epsilon": epsilon,
        "budget": budget.0,
        "converted_epsilon": rdp_to_dp(budget, a.delta)?,
        "classical_bound": classical_bound(budget, a.delta),
    });
    if let Some(t) = a.queries {
        let s1 = default_sigma1(t, budget.0);
        out["queries"] = json!(t);
        out["sigma1"] = json!(s1);
        out["count_charge"] = json!(1.0 / (2.0 * s1 * s1));
    }
    emit(cli, &out)
}

fn index(cli: &Cli, a: &IndexArgs) -> CliResult<()> {
    let spec = load_spec(cli)?;
    let data = spec.data.load()?;
    let mut store = data.store(spec.engine.clone())?;
    let tables = a.tables.unwrap_or(spec.hash.tables);
    let bits = a.bits.unwrap_or(spec.hash.bits);
    let seed = cli.seed.or(spec.hash.seed).unwrap_or(spec.seed);
    store.attach_index(tables, bits, seed)?;
    let recalls: Vec<f64> = data
        .pool
        .iter()
        .take(a.queries)
        .filter_map(|(q, _)| neighbor_recall(&store, q).transpose())
        .collect::<indknn::Result<_>>()?;
    let out = json!({
        "schema": "indknn/index/v1",
        "examples": store.len(),
        "tau": spec.engine.tau,
        "occupancy": store.index().expect("attached").occupancy(),
        "recall": {
            "queries": recalls.len(),
            "median": median(&recalls),
            "min": recalls.iter().copied().reduce(f64::min),
            "mean": (!recalls.is_empty()).then(|| recalls.iter().sum::<f64>() / recalls.len() as f64),
        },
    });
    emit(cli, &out)
}

fn baseline(cli: &Cli, a: &BaselineArgs) -> CliResult<()> {
    if cli.config.is_some() {
        let mut spec = load_spec(cli)?;
        spec.mode = Mode::Baseline;
        let mut params = spec.baseline.unwrap_or(BaselineParams { k: 0, sigma: 0.0 });
        params.k = a.k.unwrap_or(params.k);
        params.sigma = a.sigma.unwrap_or(params.sigma);
        spec.baseline = Some(params);
        let report = run_experiment(&spec)?;
        if spec.output.is_some() {
            say(&report.summary());
        } else {
            eprint!("{}", report.summary());
            say(&(report.to_json()? + "\n"));
        }
        return Ok(());
    }
    let sigma = a.sigma.ok_or_else(|| usage("--sigma is required without --config"))?;
    let delta = a.delta.ok_or_else(|| usage("--delta is required without --config"))?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParameter { name: "sigma", reason: format!("must be positive, got {sigma}") }.into());
    }
    let mut out = json!({
        "schema": "indknn/baseline/v1",
        "sigma": sigma,
        "delta": delta,
        "sensitivity": VOTE_SENSITIVITY,
        "rdp_per_query": naive_knn_rdp(1, sigma).0,
    });
    if let Some(eps) = a.epsilon {
        out["epsilon"] = json!(eps);
        out["capacity"] = json!(naive_knn_capacity(eps, sigma, delta)?);
    }
    if let Some(t) = a.queries {
        out["queries"] = json!(t);
        out["epsilon_spent"] = json!(naive_knn_accounting(t, sigma, delta)?);
    }
    emit(cli, &out)
}
