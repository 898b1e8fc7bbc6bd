//! Command-line workflow: simulate, fit, cache, predict, update, evaluate.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

mod commands;
pub mod error;
pub mod manifest;

pub use error::{CliError, CliResult, Code};
pub use manifest::{Artifact, ManifestEntry, WorkspaceManifest};

#[derive(Debug, Parser)]
#[command(name = "latent-update", version, about)]
pub struct Cli {
    /// Directory holding the workspace manifest.
    #[arg(long, global = true, default_value = ".")]
    pub workspace: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a cohort from the generative model.
    Simulate(SimulateArgs),
    /// Fit the joint posterior by MCMC and write a store.
    Fit(FitArgs),
    /// Pre-generate latent proposals for new patients.
    CacheProposals(CacheArgs),
    /// Risk for a patient not in the store.
    PredictNew(PredictArgs),
    /// Risk for a stored patient after new observations.
    UpdatePatient(UpdateArgs),
    /// Reference estimators for one patient.
    Oracle(OracleArgs),
    /// Agreement experiment against per-holdout refits.
    Evaluate(EvaluateArgs),
    /// Summaries of a store or report, or a manifest check.
    Summarize(SummarizeArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 200)]
    pub patients: usize,
    #[arg(long)]
    pub seed: u64,
    /// Cohort output (JSONL, one record per line).
    #[arg(long)]
    pub out: PathBuf,
    /// Optional output of the true latents (JSONL).
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub frac_observed: Option<f64>,
    /// Simulation config (JSON); `--patients` and `--seed` take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct FitFlags {
    #[arg(long, default_value_t = 4)]
    pub chains: usize,
    #[arg(long, default_value_t = 6000)]
    pub iters: usize,
    #[arg(long, default_value_t = 1000)]
    pub burn_in: usize,
    #[arg(long, default_value_t = 1)]
    pub thin: usize,
    /// Model prior config (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub fit: FitFlags,
    /// Also write a JSONL dump of every draw.
    #[arg(long)]
    pub export_jsonl: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CacheArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub per_draw: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct DynamicFlags {
    #[arg(long, default_value_t = 1000.0)]
    pub ess_threshold: f64,
    #[arg(long, default_value_t = 50_000)]
    pub initial: usize,
    /// Proposal budget; defaults to everything available.
    #[arg(long)]
    pub max: Option<usize>,
    #[arg(long, default_value_t = 10.0)]
    pub growth: f64,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub cache: PathBuf,
    /// Patient record (JSON).
    #[arg(long)]
    pub patient: PathBuf,
    /// Grow the proposal set until the ESS threshold is met.
    #[arg(long)]
    pub dynamic: bool,
    #[command(flatten)]
    pub dynamic_flags: DynamicFlags,
    /// Fixed proposal count when not dynamic; defaults to the whole cache.
    #[arg(long, conflicts_with = "dynamic")]
    pub proposals: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct UpdateArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub id: String,
    /// New observations (JSON with `psa` and `biopsies`).
    #[arg(long)]
    pub new_obs: PathBuf,
    /// Cohort the store was fit on; defaults to the path recorded at fit time.
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    #[command(flatten)]
    pub dynamic_flags: DynamicFlags,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OracleMethod {
    Rs,
    Wu,
    Rbis,
    Grid,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub patient: PathBuf,
    #[arg(long, value_enum)]
    pub method: OracleMethod,
    /// Proposal cache, required for `rs`.
    #[arg(long, required_if_eq("method", "rs"))]
    pub cache: Option<PathBuf>,
    /// Accept/reject seed, required for `rs`.
    #[arg(long, required_if_eq("method", "rs"))]
    pub seed: Option<u64>,
    /// Proposals for `rs`; defaults to the whole cache.
    #[arg(long)]
    pub proposals: Option<usize>,
    #[arg(long, default_value_t = 161)]
    pub grid_points: usize,
    /// Parameter draws used by the grid, evenly spaced.
    #[arg(long, default_value_t = 200)]
    pub grid_draws: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub holdouts: usize,
    /// Comma-separated subset of is, is-small, is-large, rs, wu, rbis.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "is,is-small,is-large,rs,wu,rbis"
    )]
    pub methods: Vec<String>,
    /// Report directory; must not already hold a report.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub fit: FitFlags,
    #[arg(long, default_value_t = 10)]
    pub per_draw: usize,
    #[command(flatten)]
    pub dynamic_flags: DynamicFlags,
    #[arg(long, default_value_t = 5000)]
    pub small_budget: usize,
    /// Large fixed budget; defaults to the whole cache.
    #[arg(long)]
    pub large_budget: Option<usize>,
    /// `off` records every elapsed time as zero for byte-identical reruns.
    #[arg(long, value_enum, default_value = "on")]
    pub timing: Toggle,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("target").required(true).args(["store", "report", "verify"])))]
pub struct SummarizeArgs {
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Report directory written by `evaluate`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Re-hash every artifact in the workspace manifest.
    #[arg(long)]
    pub verify: bool,
}

/// Parses and runs one command; returns the process exit status. Errors
/// are written to stderr as `{"error": CODE, "message": ...}`.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            report_error(&CliError::Usage(e.render().to_string()));
            return 2;
        }
    };
    let argv: Vec<String> = argv
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match commands::dispatch(&cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            report_error(&e);
            2
        }
    }
}

fn report_error(e: &CliError) {
    let message = e.to_string();
    let report = error::ErrorReport {
        error: e.code(),
        message: message.trim_end(),
    };
    eprintln!(
        "{}",
        serde_json::to_string(&report).expect("error report serializes")
    );
}

pub(crate) fn warn(code: Code, message: &str) {
    let report = error::WarningReport {
        warning: code,
        message,
    };
    eprintln!(
        "{}",
        serde_json::to_string(&report).expect("warning serializes")
    );
}
