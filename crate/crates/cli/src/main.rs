//! `gcwm`: fit, classify, test and simulate cluster-weighted models from the shell.
//!
//! Exit codes: 0 success, 2 input error, 3 convergence failure, 4 sizing refusal.
//! `GCWM_THREADS` caps the worker pool.

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Parser)]
#[command(name = "gcwm", version, about = "Generalized and zero-inflated cluster-weighted models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model for one K or select K by BIC over a range.
    Fit(FitArgs),
    /// Assign rows of a data set to the components of a fitted model.
    Classify(ClassifyArgs),
    /// Per-cluster likelihood-ratio test of a ZIP model against a Poisson model.
    Lrtest(LrtestArgs),
    /// Run a simulation study from a TOML config.
    Simulate(SimulateArgs),
}

#[derive(Args, Clone)]
pub struct DataArgs {
    /// CSV data file.
    #[arg(long)]
    pub data: PathBuf,
    /// TOML schema mapping columns to roles.
    #[arg(long)]
    pub schema: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    /// Every continuous covariate Gaussian.
    Cwm,
    Gcwm,
    /// Zero-inflated Poisson conditionals with Bernoulli-Poisson partitioning.
    #[value(name = "zi-gcwm")]
    ZiGcwm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ResponseArg {
    Severity,
    LogSeverity,
    Frequency,
    Zero,
}

#[derive(Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: DataArgs,
    #[arg(long, value_enum, default_value = "gcwm")]
    pub kind: ModelKind,
    /// Conditional family of the response (ignored by zi-gcwm).
    #[arg(long, value_enum, default_value = "severity")]
    pub response: ResponseArg,
    /// Number of components.
    #[arg(long, conflicts_with = "k_range")]
    pub k: Option<String>,
    /// Candidate component counts, `a..b` (inclusive) or a comma list.
    #[arg(long)]
    pub k_range: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Model document to write; the selection table goes next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated regression terms (default: every covariate); `log(name)`
    /// logs a positive covariate.
    #[arg(long)]
    pub select_response: Option<String>,
    /// Comma-separated structural-zero terms for zi-gcwm (default: the response terms).
    #[arg(long)]
    pub select_bernoulli: Option<String>,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub offset_exposure: bool,
    /// Weight severity fits by the claim-count column.
    #[arg(long)]
    pub weights_claims: bool,
    /// Starting partition of the zi-gcwm ZIP stage.
    #[arg(long, default_value = "bp")]
    pub partitioning: String,
    /// Random starts in addition to the distance-based start.
    #[arg(long, default_value_t = 10)]
    pub restarts: usize,
}

#[derive(Args)]
pub struct ClassifyArgs {
    /// Model document written by `fit`.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub input: DataArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct LrtestArgs {
    /// Poisson (null) model document.
    #[arg(long)]
    pub poisson: PathBuf,
    /// Zero-inflated (alternative) model document.
    #[arg(long)]
    pub zip: PathBuf,
    #[command(flatten)]
    pub input: DataArgs,
    /// Print every cluster, not only the pooled row.
    #[arg(long)]
    pub per_cluster: bool,
    /// Optional CSV copy of the test table.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SimulateArgs {
    /// Study config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's run count.
    #[arg(long)]
    pub runs: Option<usize>,
    /// Overrides the config's conditions (comma list of normal, close).
    #[arg(long)]
    pub condition: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("GCWM_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| CliError::input(format!("GCWM_THREADS must be a positive integer, got `{v}`")))?;
    if n == 0 {
        return Err(CliError::input("GCWM_THREADS must be a positive integer, got `0`"));
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::input(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Fit(a) => commands::fit(&a),
        Command::Classify(a) => commands::classify(&a),
        Command::Lrtest(a) => commands::lrtest(&a),
        Command::Simulate(a) => commands::simulate(&a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code() as u8)
        }
    }
}
