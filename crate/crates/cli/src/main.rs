mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::parser::ValueSource;
use clap::{ArgAction, ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use regmvst::bootstrap::BootstrapConfig;
use regmvst::engine::{DelayModel, EngineKind, FitConfig, Init};
use regmvst::io::read_theta;
use regmvst::simgen::{Scheme, SchemeConfig};
use regmvst::Error;

use commands::{FitOutputs, UsageError};

#[derive(Parser, Debug)]
#[command(name = "regmvst", version, about = "Matrix-variate skew-t regression for irregularly timed multivariate longitudinal data")]
struct Cli {
    /// More log output on stderr (-v info, -vv debug); RUST_LOG also works
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic dataset from a simulation scheme
    Simulate(SimulateArgs),
    /// Fit the model to a dataset
    Fit(FitArgs),
    /// Percentile bootstrap intervals for every parameter
    Bootstrap(BootstrapArgs),
    /// Time engines on one dataset and tabulate the step breakdown
    Bench(BenchArgs),
    /// Complete and observed information and the EM rate matrix
    Info(InfoArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Simulation scheme (1 and 2 share the inverse-gamma generator, 3 uses GIG mixing)
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=3))]
    scheme: u8,
    /// Number of subjects
    #[arg(short, long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV
    #[arg(long, value_name = "CSV")]
    out: PathBuf,
    /// Also write the generating parameters as JSON
    #[arg(long, value_name = "JSON")]
    truth_out: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum EngineArg {
    Ecme,
    Pecme,
    Adecme,
}

impl From<EngineKind> for EngineArg {
    fn from(e: EngineKind) -> Self {
        match e {
            EngineKind::Ecme => EngineArg::Ecme,
            EngineKind::Pecme => EngineArg::Pecme,
            EngineKind::Adecme => EngineArg::Adecme,
        }
    }
}

impl From<EngineArg> for EngineKind {
    fn from(e: EngineArg) -> Self {
        match e {
            EngineArg::Ecme => EngineKind::Ecme,
            EngineArg::Pecme => EngineKind::Pecme,
            EngineArg::Adecme => EngineKind::Adecme,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum InitArg {
    /// Pooled least squares with fixed dependence and tail values
    Default,
    /// Jittered version of the default start
    Random,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum DelayArg {
    None,
    /// Uniform sleep per exchange in [--delay-min-ms, --delay-max-ms]
    Uniform,
    /// Sleep proportional to partition size, last worker --slow-factor times slower
    SlowWorker,
}

#[derive(Args, Debug, Clone)]
struct EngineOpts {
    /// JSON fit settings; flags given explicitly take precedence
    #[arg(long, value_name = "JSON")]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = EngineArg::from(FitConfig::default().engine))]
    engine: EngineArg,
    /// Number of workers for the parallel engines
    #[arg(short = 'k', long, default_value_t = FitConfig::default().workers_k)]
    workers: usize,
    /// Fraction of workers the asynchronous manager waits for
    #[arg(long, default_value_t = FitConfig::default().gamma)]
    gamma: f64,
    /// Probability of forcing a fully synchronous iteration
    #[arg(long, default_value_t = FitConfig::default().zeta)]
    zeta: f64,
    /// Stop when no parameter moves by this much
    #[arg(long, default_value_t = FitConfig::default().epsilon)]
    epsilon: f64,
    #[arg(long, default_value_t = FitConfig::default().max_iter)]
    max_iter: u64,
    #[arg(long, default_value_t = FitConfig::default().seed)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = InitArg::Default)]
    init: InitArg,
    /// Starting parameters as JSON (replaces --init)
    #[arg(long, value_name = "JSON")]
    start: Option<PathBuf>,
    /// Record the observed log-likelihood after every iteration
    #[arg(long)]
    trace_loglik: bool,
    /// Artificial worker latency
    #[arg(long, value_enum, default_value_t = DelayArg::None)]
    delay: DelayArg,
    #[arg(long, default_value_t = 0.0)]
    delay_min_ms: f64,
    #[arg(long, default_value_t = 1.0)]
    delay_max_ms: f64,
    #[arg(long, default_value_t = 20.0)]
    delay_per_subject_us: f64,
    #[arg(long, default_value_t = 2.0)]
    slow_factor: f64,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Input CSV (subject_id, time, y_*, x_*)
    #[arg(long, value_name = "CSV")]
    data: PathBuf,
    #[command(flatten)]
    engine: EngineOpts,
    /// Number of starts (the configured one plus random ones); the best final log-likelihood wins
    #[arg(long, default_value_t = 1)]
    restarts: usize,
    /// Output JSON with estimates and diagnostics
    #[arg(long, value_name = "JSON")]
    out: PathBuf,
    /// Per-iteration step timings (seconds)
    #[arg(long, value_name = "CSV")]
    timings: Option<PathBuf>,
    /// Standardized residuals at the estimate
    #[arg(long, value_name = "CSV")]
    residuals: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BootstrapArgs {
    #[arg(long, value_name = "CSV")]
    data: PathBuf,
    #[command(flatten)]
    engine: EngineOpts,
    /// Number of bootstrap replicates
    #[arg(short = 'b', long = "b", default_value_t = BootstrapConfig::default().replicates)]
    replicates: usize,
    /// Interval coverage level
    #[arg(long, default_value_t = BootstrapConfig::default().level)]
    level: f64,
    /// Start replicate fits at the configured start instead of the full-data estimate
    #[arg(long)]
    cold_start: bool,
    /// Interval CSV (param, point, lo, hi)
    #[arg(long, value_name = "CSV")]
    out: PathBuf,
    /// Interval summary and full-data estimate as JSON
    #[arg(long, value_name = "JSON")]
    summary: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_name = "CSV")]
    data: PathBuf,
    #[command(flatten)]
    engine: EngineOpts,
    /// Comma-separated grid; adecme entries may carry a gamma as adecme:G
    #[arg(long, default_value = "ecme,pecme,adecme:0.625,adecme:0.75,adecme:0.875")]
    grid: String,
    /// Repetitions per grid entry (seeds seed, seed+1, ...)
    #[arg(long, default_value_t = 3)]
    reps: usize,
    /// Summary CSV: mean and sd of each timing metric per grid entry
    #[arg(long, value_name = "CSV")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InfoArgs {
    /// JSON with beta (q×p rows), a, sigma, psi, nu and x (n×q rows)
    #[arg(long, value_name = "JSON")]
    params: PathBuf,
    /// Monte Carlo draws for the observed information
    #[arg(long, default_value_t = 20000)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "JSON")]
    out: PathBuf,
}

fn explicit(m: &ArgMatches, id: &str) -> bool {
    m.value_source(id) == Some(ValueSource::CommandLine)
}

/// Defaults, then the --config file, then explicit flags.
fn fit_config(opts: &EngineOpts, m: &ArgMatches) -> Result<FitConfig> {
    let mut cfg = match &opts.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<FitConfig>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => FitConfig::default(),
    };
    let set = |id: &str| opts.config.is_none() || explicit(m, id);
    if set("engine") {
        cfg.engine = opts.engine.into();
    }
    if set("workers") {
        cfg.workers_k = opts.workers;
    }
    if set("gamma") {
        cfg.gamma = opts.gamma;
    }
    if set("zeta") {
        cfg.zeta = opts.zeta;
    }
    if set("epsilon") {
        cfg.epsilon = opts.epsilon;
    }
    if set("max_iter") {
        cfg.max_iter = opts.max_iter;
    }
    if set("seed") {
        cfg.seed = opts.seed;
    }
    if let Some(path) = &opts.start {
        cfg.init = Init::Explicit(read_theta(path)?);
    } else if set("init") {
        cfg.init = match opts.init {
            InitArg::Default => Init::Default,
            InitArg::Random => Init::Random,
        };
    }
    if opts.trace_loglik {
        cfg.trace_loglik = true;
    }
    let delay_flags = ["delay", "delay_min_ms", "delay_max_ms", "delay_per_subject_us", "slow_factor"];
    if opts.config.is_none() || delay_flags.iter().any(|id| explicit(m, id)) {
        cfg.delay = match opts.delay {
            DelayArg::None => DelayModel::None,
            DelayArg::Uniform => DelayModel::Uniform { min_ms: opts.delay_min_ms, max_ms: opts.delay_max_ms },
            DelayArg::SlowWorker => DelayModel::OneSlowWorker {
                per_subject_us: opts.delay_per_subject_us,
                slow_factor: opts.slow_factor,
            },
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli, matches: &ArgMatches) -> Result<()> {
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand is required");
    match cli.command {
        Cmd::Simulate(a) => {
            let scheme = if a.scheme == 3 { Scheme::S3 } else { Scheme::S1s2 };
            commands::simulate_cmd(&SchemeConfig::new(scheme, a.n, a.seed), &a.out, a.truth_out.as_deref())
        }
        Cmd::Fit(a) => {
            let cfg = fit_config(&a.engine, sub)?;
            let outputs = FitOutputs { out: &a.out, timings: a.timings.as_deref(), residuals: a.residuals.as_deref() };
            commands::fit_cmd(&a.data, &cfg, a.restarts, &outputs)
        }
        Cmd::Bootstrap(a) => {
            let fit = fit_config(&a.engine, sub)?;
            let cfg = BootstrapConfig {
                replicates: a.replicates,
                level: a.level,
                seed: fit.seed,
                warm_start: !a.cold_start,
                fit,
            };
            commands::bootstrap_cmd(&a.data, &cfg, &a.out, a.summary.as_deref())
        }
        Cmd::Bench(a) => {
            let grid = commands::parse_grid(&a.grid)?;
            let cfg = fit_config(&a.engine, sub)?;
            commands::bench_cmd(&a.data, &cfg, &grid, a.reps, &a.out)
        }
        Cmd::Info(a) => commands::info_cmd(&a.params, a.draws, a.seed, &a.out),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err.chain().any(|e| {
        e.downcast_ref::<UsageError>().is_some() || matches!(e.downcast_ref::<Error>(), Some(Error::Config(_)))
    });
    if usage {
        2
    } else {
        1
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().format_timestamp(None).init();
}

fn main() -> ExitCode {
    let matches = Cli::command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    init_logging(cli.verbose);
    match run(cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
