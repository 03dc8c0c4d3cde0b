//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
//! error. `KRONID_THREADS` caps the worker pool.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::dims::Dims;
use crate::error::KronError;
use crate::export::{read_json, read_truth, support_dot, write_impulse, write_json, write_truth, FitReport};
use crate::hyperopt::{ard_certificate, fit, ArdReport, EstimatorConfig, ShapeGrid};
use crate::kernel::Variant;
use crate::likelihood::NoiseModel;
use crate::metrics::{
    airf, err, monte_carlo, write_gnuplot, write_jsonl, write_summary_csv, Protocol, DEFAULT_SEED,
};
use crate::netgen::{random_support, random_system, simulate, InputSpec, SimOptions};
use crate::regress::{
    fold_series, load_dataset_csv, read_dims_json, write_dataset_csv, write_dims_json, Dataset,
    RegressionMode,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "kronid", version, about = "Identification of sparse Kronecker dynamic networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a random network and simulate a dataset from it.
    Simulate(SimulateArgs),
    /// Fit one estimator to a dataset.
    Identify(IdentifyArgs),
    /// Run a Monte Carlo study comparing estimators.
    Montecarlo(MonteCarloArgs),
    /// Zero-lock certificate of the scale hyperparameters.
    ArdCheck(ArdArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub p1: usize,
    #[arg(long)]
    pub p2: usize,
    #[arg(long, default_value_t = 0)]
    pub m: usize,
    #[arg(long, default_value_t = 0.6)]
    pub density: f64,
    /// Draw E2 = E1 (needs p1 = p2).
    #[arg(long)]
    pub hierarchical: bool,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// State-space order of each entry.
    #[arg(long, default_value_t = 20)]
    pub order: usize,
    #[arg(long, default_value_t = 0.95)]
    pub pole_radius: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise_var: f64,
    #[arg(long, default_value_t = 200)]
    pub burn_in: usize,
    /// White instead of lowpass input.
    #[arg(long)]
    pub white_input: bool,
    #[arg(long)]
    pub noiseless: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Standard,
    /// Spatio-temporal: fold a periodic series into modules.
    St,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GridArg {
    Full,
    Coarse,
}

/// Estimator settings shared by `identify` and `ard-check`; flags override
/// the JSON config file.
#[derive(Debug, Args)]
pub struct EstimatorArgs {
    /// JSON estimator configuration (unknown keys are rejected).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lags: Option<usize>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long, value_enum)]
    pub shape_grid: Option<GridArg>,
    #[arg(long, value_enum, default_value_t = ModeArg::Standard)]
    pub mode: ModeArg,
    /// Period of the series in spatio-temporal mode.
    #[arg(long)]
    pub p1_period: Option<usize>,
}

/// Data location. Dimensions come from `--p1/--p2/--m` or the `dims.json`
/// sidecar next to the data file.
#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub dims: Option<PathBuf>,
    #[arg(long)]
    pub p1: Option<usize>,
    #[arg(long)]
    pub p2: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
}

#[derive(Debug, Args)]
pub struct IdentifyArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub estimator: EstimatorArgs,
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Ground truth (`truth.json`) to score the fit against.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MonteCarloArgs {
    /// JSON protocol (unknown keys are rejected).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub p1: Option<usize>,
    #[arg(long)]
    pub p2: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub density: Option<f64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated estimator list, e.g. `K,S,SS`.
    #[arg(long, value_delimiter = ',')]
    pub estimators: Option<Vec<Variant>>,
    #[arg(long)]
    pub lags: Option<usize>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long, value_enum)]
    pub shape_grid: Option<GridArg>,
    /// Add per-fit wall time to the records (breaks byte-identical output).
    #[arg(long)]
    pub record_timing: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ArdArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub estimator: EstimatorArgs,
    /// Where to write the JSON report.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(KronError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

impl From<KronError> for CliError {
    fn from(e: KronError) -> Self {
        match e {
            KronError::Config(m) => CliError::Usage(m),
            other => CliError::Runtime(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("{e}");
        return e.exit_code();
    }
    match execute(&cli.command) {
        Ok(text) => {
            print!("{text}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var("KRONID_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("KRONID_THREADS must be a positive integer, got {value:?}")))?;
    // a pool built earlier in the process stays in place
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

/// Runs a parsed command and returns the text it prints.
pub fn execute(cmd: &Command) -> CliResult<String> {
    match cmd {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Identify(a) => cmd_identify(a),
        Command::Montecarlo(a) => cmd_montecarlo(a),
        Command::ArdCheck(a) => cmd_ard_check(a),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(KronError::io(dir, e)))
}

pub fn cmd_simulate(a: &SimulateArgs) -> CliResult<String> {
    let dims = Dims::new(a.p1, a.p2, a.m).map_err(|e| CliError::Usage(e.to_string()))?;
    if a.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let support = random_support(dims, a.density, a.hierarchical, a.seed)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let noise = NoiseModel::constant(dims.outputs(), a.noise_var).map_err(|e| CliError::Usage(e.to_string()))?;
    let gt = random_system(&support, a.order, a.pole_radius, noise, a.seed).map_err(|e| match e {
        KronError::InvalidArgument(m) => CliError::Usage(m),
        other => CliError::Runtime(other),
    })?;
    let opts = SimOptions {
        input: if a.white_input { InputSpec::White } else { InputSpec::default() },
        burn_in: a.burn_in,
        noiseless: a.noiseless,
    };
    let data = simulate(&gt, a.n, &opts, a.seed.wrapping_add(1))?;
    create_dir(&a.out)?;
    write_dataset_csv(a.out.join("data.csv"), &data)?;
    write_dims_json(a.out.join("dims.json"), dims)?;
    write_truth(&a.out, "truth", &gt)?;
    let edges = support.edges();
    Ok(format!(
        "simulated N={} samples of dims ({}, {}, {}): {} G edges, {} F edges, scale {:.4} -> {}\n",
        a.n,
        dims.p1,
        dims.p2,
        dims.m,
        edges.g_edges(),
        edges.f_edges(),
        gt.scale,
        a.out.display()
    ))
}

fn estimator_config(a: &EstimatorArgs) -> CliResult<EstimatorConfig> {
    let mut cfg: EstimatorConfig = match &a.config {
        Some(path) => read_json(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?,
        None => EstimatorConfig::default(),
    };
    if let Some(v) = a.lags {
        cfg.lags = v;
    }
    if let Some(v) = a.restarts {
        cfg.restarts = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.max_iters {
        cfg.max_iters = v;
    }
    if let Some(g) = a.shape_grid {
        cfg.shape_grid = grid(g);
    }
    match (a.mode, a.p1_period) {
        (ModeArg::St, None) => {
            return Err(CliError::Usage("--mode st requires --p1-period".into()));
        }
        (ModeArg::Standard, Some(_)) => {
            return Err(CliError::Usage("--p1-period is only valid with --mode st".into()));
        }
        (ModeArg::St, Some(_)) => cfg.mode = RegressionMode::SpatioTemporal,
        (ModeArg::Standard, None) => {}
    }
    Ok(cfg)
}

fn grid(g: GridArg) -> ShapeGrid {
    match g {
        GridArg::Full => ShapeGrid::Full,
        GridArg::Coarse => ShapeGrid::Coarse,
    }
}

/// Loads the dataset; in spatio-temporal mode the file holds the raw
/// periodic series (p1 = 1) which is folded with the given period.
fn load_data(a: &DataArgs, est: &EstimatorArgs) -> CliResult<Dataset> {
    let dims = match (a.p1, a.p2, a.m) {
        (Some(p1), Some(p2), m) => Dims::new(p1, p2, m.unwrap_or(0)).map_err(|e| CliError::Usage(e.to_string()))?,
        (None, None, None) => {
            let sidecar = a.dims.clone().unwrap_or_else(|| {
                a.data.parent().unwrap_or_else(|| Path::new(".")).join("dims.json")
            });
            read_dims_json(&sidecar)?
        }
        _ => return Err(CliError::Usage("give both --p1 and --p2 (and optionally --m)".into())),
    };
    let data = load_dataset_csv(&a.data, dims)?;
    match est.p1_period {
        Some(period) if est.mode == ModeArg::St => {
            if dims.p1 != 1 {
                return Err(CliError::Usage(
                    "spatio-temporal mode expects the raw series (p1 = 1)".into(),
                ));
            }
            let u = (dims.m > 0).then(|| data.u().clone());
            Ok(fold_series(data.y(), u.as_ref(), period)?)
        }
        _ => Ok(data),
    }
}

pub fn cmd_identify(a: &IdentifyArgs) -> CliResult<String> {
    let mut cfg = estimator_config(&a.estimator)?;
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    let data = load_data(&a.data, &a.estimator)?;
    cfg.validate(data.dims())?;
    let res = fit(&data, &cfg)?;
    create_dir(&a.out)?;
    let report = FitReport::from(&res);
    write_json(a.out.join("result.json"), &report)?;
    write_impulse(a.out.join("impulse.bin"), &res.estimate)?;
    let dot = support_dot(res.dims, &res.edges)?;
    let dot_path = a.out.join("network.dot");
    std::fs::write(&dot_path, dot).map_err(|e| CliError::Runtime(KronError::io(&dot_path, e)))?;
    let mut text = format!(
        "variant {}: nll {:.6}, {} G edges, {} F edges, converged {} -> {}\n",
        res.variant,
        res.nll,
        res.edges.g_edges(),
        res.edges.f_edges(),
        res.diagnostics.converged,
        a.out.display()
    );
    if let Some(path) = &a.truth {
        let gt = read_truth(path)?;
        let score = airf(&gt, &res.estimate, cfg.lags)?;
        let e = err(&gt.support.edges(), &res.edges)?;
        let _ = writeln!(text, "AIRF {score:.3}, ERR {e:.4}");
    }
    Ok(text)
}

fn protocol(a: &MonteCarloArgs) -> CliResult<Protocol> {
    let mut p: Protocol = match &a.config {
        Some(path) => read_json(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?,
        None => Protocol::default(),
    };
    if let Some(v) = a.p1 {
        p.dims.p1 = v;
    }
    if let Some(v) = a.p2 {
        p.dims.p2 = v;
    }
    if let Some(v) = a.m {
        p.dims.m = v;
    }
    if let Some(v) = a.density {
        p.density = v;
    }
    if let Some(v) = a.n {
        p.samples = v;
    }
    if let Some(v) = a.runs {
        p.runs = v;
    }
    if let Some(v) = a.seed {
        p.master_seed = v;
    }
    if let Some(v) = &a.estimators {
        p.estimators = v.clone();
    }
    if let Some(v) = a.lags {
        p.estimator.lags = v;
    }
    if let Some(v) = a.restarts {
        p.estimator.restarts = v;
    }
    if let Some(g) = a.shape_grid {
        p.estimator.shape_grid = grid(g);
    }
    p.validate()?;
    Ok(p)
}

pub fn cmd_montecarlo(a: &MonteCarloArgs) -> CliResult<String> {
    let p = protocol(a)?;
    let study = monte_carlo(&p, a.record_timing)?;
    create_dir(&a.out)?;
    write_jsonl(a.out.join("records.jsonl"), &study.records)?;
    write_summary_csv(a.out.join("summary.csv"), &study.summary)?;
    write_gnuplot(a.out.join("airf.dat"), &study, "airf")?;
    write_gnuplot(a.out.join("err.dat"), &study, "err")?;
    let mut text = format!(
        "{} runs at dims ({}, {}, {}), N={}: {} records, {} failures\n",
        p.runs,
        p.dims.p1,
        p.dims.p2,
        p.dims.m,
        p.samples,
        study.records.len(),
        study.failures.len()
    );
    for s in &study.summary {
        let med = |m: &Option<crate::metrics::MetricSummary>| m.map_or(f64::NAN, |m| m.median);
        let _ = writeln!(
            text,
            "{:>3}: median AIRF {:.2}, median ERR {:.4} ({} ok, {} failed)",
            s.estimator.name(),
            med(&s.airf),
            med(&s.err),
            s.succeeded,
            s.failed
        );
    }
    Ok(text)
}

fn describe_ard(rep: &ArdReport) -> String {
    let (locked, total) = rep.lockable_count();
    let mut text = if rep.all_lockable() {
        format!("all scales lockable ({locked}/{total})\n")
    } else {
        format!("{locked}/{total} scales lockable\n")
    };
    let flags = |v: &[bool]| v.iter().map(|&b| if b { '0' } else { '+' }).collect::<String>();
    let _ = writeln!(text, "lambda {}", flags(&rep.lambda));
    let _ = writeln!(text, "gamma  {}", flags(&rep.gamma));
    if !rep.pi.is_empty() {
        let _ = writeln!(text, "pi     {}", flags(&rep.pi));
        let _ = writeln!(text, "omega  {}", flags(&rep.omega));
    }
    let _ = writeln!(
        text,
        "threshold G {:.3e}, F {:.3e} (rank {} / {}, sigma2 {:.4})",
        rep.threshold_g, rep.threshold_f, rep.rank_p, rep.rank_r, rep.sigma2
    );
    text
}

pub fn cmd_ard_check(a: &ArdArgs) -> CliResult<String> {
    let cfg = estimator_config(&a.estimator)?;
    let data = load_data(&a.data, &a.estimator)?;
    cfg.validate(data.dims())?;
    let rep = ard_certificate(&data, &cfg)?;
    if let Some(path) = &a.json {
        write_json(path, &rep)?;
    }
    Ok(describe_ard(&rep))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        std::iter::once("kronid".to_string())
            .chain(s.split_whitespace().map(String::from))
            .collect()
    }

    #[test]
    fn missing_p1_is_a_usage_error() {
        assert_eq!(run(args("simulate --p2 2 --out /tmp/never")), EXIT_USAGE);
        assert_eq!(run(args("--help")), EXIT_OK);
    }

    #[test]
    fn st_mode_needs_a_period() {
        let e = estimator_config(&EstimatorArgs {
            config: None,
            lags: None,
            restarts: None,
            seed: None,
            max_iters: None,
            shape_grid: None,
            mode: ModeArg::St,
            p1_period: None,
        })
        .unwrap_err();
        assert_eq!(e.exit_code(), EXIT_USAGE);
    }

    #[test]
    fn estimator_list_parses() {
        let cli = Cli::try_parse_from(args("montecarlo --estimators K,s,SS --out x")).unwrap();
        match cli.command {
            Command::Montecarlo(a) => assert_eq!(a.estimators.unwrap(), vec![Variant::K, Variant::S, Variant::SS]),
            _ => unreachable!(),
        }
    }

    #[test]
    fn non_numeric_dims_are_rejected() {
        assert!(Cli::try_parse_from(args("simulate --p1 x --p2 2 --out y")).is_err());
    }
}
