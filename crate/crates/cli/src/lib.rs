//! Command-line front end: direct estimation, model fitting, benchmarking,
//! simulation and reporting.
//!
//! Exit codes: 0 success, 1 input error, 2 numerical failure, 3 diagnostics
//! gate (some R-hat above 1.05 without `--force`).

pub mod commands;
pub mod manifest;
pub mod schema;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use multiscale_sae::benchmark::Loss;
use multiscale_sae::models::Variant;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_GATE: i32 = 3;

/// Largest R-hat accepted before `fit` refuses to summarize.
pub const RHAT_GATE: f64 = 1.05;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] multiscale_sae::Error),
    #[error("{0}")]
    Usage(String),
    #[error("diagnostics gate: {0}")]
    Gate(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(multiscale_sae::Error::Numerical(_)) => EXIT_NUMERICAL,
            CliError::Core(_) | CliError::Usage(_) => EXIT_INPUT,
            CliError::Gate(_) => EXIT_GATE,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "msae", version, about = "Multi-scale small-area estimation of poverty rates")]
pub struct Cli {
    /// Number of worker threads (all cores when unset).
    #[arg(long, global = true, env = "MSAE_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Hájek direct estimates, design effects and effective sample sizes.
    Direct(DirectArgs),
    /// Fit a multi-scale model and summarize poverty-rate draws.
    Fit(FitArgs),
    /// Project sub-area draws onto a national benchmark.
    Benchmark(BenchmarkArgs),
    /// Run the design-based simulation study.
    Simulate(SimulateArgs),
    /// Compare model-based with direct estimates.
    Report(ReportArgs),
    /// Print the JSON schema of a configuration or output file.
    Schema(SchemaArgs),
}

#[derive(Debug, Args)]
pub struct DirectArgs {
    /// Survey microdata CSV.
    #[arg(long)]
    pub survey: PathBuf,
    /// Population shares CSV (`subarea_id,area_id,q`).
    #[arg(long)]
    pub shares: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Direct estimates written by `msae direct`.
    #[arg(long)]
    pub direct: PathBuf,
    #[arg(long)]
    pub shares: PathBuf,
    #[arg(long)]
    pub area_covariates: Option<PathBuf>,
    #[arg(long)]
    pub subarea_covariates: Option<PathBuf>,
    /// Model configuration JSON; overrides `--variant`.
    #[arg(long, conflicts_with = "variant")]
    pub model: Option<PathBuf>,
    /// Model variant when no configuration file is given; all covariate
    /// columns are used.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    /// Sampler configuration JSON.
    #[arg(long)]
    pub sampler: Option<PathBuf>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Top-level seed for the sampler and out-of-sample predictions.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Summarize even when some R-hat exceeds 1.05.
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: multiscale_sae::Error| e.to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Bregman,
    Squared,
}

impl From<LossArg> for Loss {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Bregman => Loss::Bregman,
            LossArg::Squared => Loss::Squared,
        }
    }
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// Sub-area poverty-rate draws (`chain,iter,<subarea ids>`).
    #[arg(long)]
    pub draws: PathBuf,
    #[arg(long)]
    pub shares: PathBuf,
    /// National poverty rate to benchmark to.
    #[arg(long = "t", allow_hyphen_values = true)]
    pub t: f64,
    /// Loss weights (`subarea_id,psi`); defaults to the shares.
    #[arg(long)]
    pub psi: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "bregman")]
    pub loss: LossArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Simulation configuration JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Scenario preset (1: sub-area variation dominates, 2: area variation
    /// dominates); with `--config`, swaps in that scenario's effect scales.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub scenario: Option<u8>,
    /// Use the desk-scale preset instead of the full-size one.
    #[arg(long)]
    pub desk: bool,
    /// Override the number of replicates.
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Estimates written by `msae fit` or `msae benchmark`.
    #[arg(long)]
    pub estimates: PathBuf,
    #[arg(long)]
    pub direct: PathBuf,
    #[arg(long)]
    pub shares: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SchemaKind {
    Model,
    Sampler,
    Simulation,
    Summary,
}

#[derive(Debug, Args)]
pub struct SchemaArgs {
    #[arg(value_enum)]
    pub kind: SchemaKind,
}

fn init_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        // a global pool can only be built once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

pub fn execute(cli: Cli) -> CliResult<()> {
    init_threads(cli.threads);
    match cli.command {
        Command::Direct(a) => commands::cmd_direct(&a),
        Command::Fit(a) => commands::cmd_fit(&a),
        Command::Benchmark(a) => commands::cmd_benchmark(&a),
        Command::Simulate(a) => commands::cmd_simulate(&a),
        Command::Report(a) => commands::cmd_report(&a),
        Command::Schema(a) => {
            println!("{}", schema::schema(a.kind));
            Ok(())
        }
    }
}

/// Parse arguments, run the command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
