use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use switchdiff::SwitchScheme;

#[derive(Debug, Parser)]
#[command(name = "switchdiff", version, about = "Stability analysis and simulation of regime-switching diffusions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Chain diagnostics and stability certificates, no simulation.
    Analyze(RunArgs),
    /// Monte Carlo ensemble with trajectory CSVs and functional estimates.
    Simulate(RunArgs),
    /// Pathwise decay-rate estimate with its quantile curve.
    VerifyRate(RunArgs),
    /// Basic-coupling check of the switching law against its frozen version.
    CoupledTest(RunArgs),
    /// Runs the full pipeline on a bundled scenario.
    Reproduce(ReproduceArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum SchemeArg {
    PerStepThinning,
    ExponentialProposals,
}

impl From<SchemeArg> for SwitchScheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::PerStepThinning => SwitchScheme::PerStepThinning,
            SchemeArg::ExponentialProposals => SwitchScheme::ExponentialProposals,
        }
    }
}

/// Settings that override the scenario file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub truncation: Option<usize>,
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    /// Ball radius for the stay-in-ball and exit checks.
    #[arg(long)]
    pub h: Option<f64>,
    /// Initial point, comma separated. A single value for a multi-dimensional
    /// model is placed on the first axis.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub x0: Option<Vec<f64>>,
    /// Quantile level ε for the rate estimate.
    #[arg(long)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    /// Output directory; nothing is written without it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Args)]
pub struct ReproduceArgs {
    /// Bundled preset name; `list` prints them.
    pub preset: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}
