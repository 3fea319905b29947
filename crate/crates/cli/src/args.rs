//! Command-line arguments.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use saber_core::Condition;

#[derive(Debug, Parser)]
#[command(name = "saber", version, about = "EEG spatial-attention analysis pipeline")]
pub struct Cli {
    /// Worker threads (default: available parallelism). Results do not
    /// depend on this value.
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with known ground truth.
    Simulate(SimulateArgs),
    /// Clean continuous data, epoch, reject and equalise.
    Preprocess(StageArgs),
    /// Contralateral and ipsilateral ERPs.
    Erp(StageArgs),
    /// Alpha lateralization index timecourses.
    Lateralize(StageArgs),
    /// Inverted encoding model with permuted null.
    Iem(StageArgs),
    /// Group statistics over per-subject stage outputs.
    Stats(StatsArgs),
    /// All enabled stages for one or more subjects plus the report.
    Run(RunArgs),
    /// Check a dataset directory for format and plan violations.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct StageArgs {
    /// Dataset directory, or a `saber preprocess` output directory.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON pipeline configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "SABER_SEED")]
    pub seed: Option<u64>,
    /// Overwrite an existing output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Per-subject output directories of the stage subcommands.
    #[arg(long = "input", required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "SABER_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON pipeline configuration.
    pub config: Option<PathBuf>,
    /// Subject dataset directories; replaces the config's inputs.
    #[arg(long = "input")]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = "SABER_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub no_erp: bool,
    #[arg(long)]
    pub no_lateralization: bool,
    #[arg(long)]
    pub no_iem: bool,
    #[arg(long)]
    pub no_permutations: bool,
    #[arg(long)]
    pub no_stats: bool,
    #[arg(long)]
    pub no_plots: bool,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    pub dataset: PathBuf,
    /// Block length used for the equal-sampling check; read from
    /// `plan.json` when present.
    #[arg(long)]
    pub trials_per_block: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, env = "SABER_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
    #[arg(long, default_value_t = 1000.0)]
    pub rate: f64,
    /// JSON file with simulation parameters; flags override it.
    #[arg(long)]
    pub params: Option<PathBuf>,

    // plan
    #[arg(long, value_delimiter = ',')]
    pub conditions: Option<Vec<Condition>>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub trials_per_block: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub bins: Option<Vec<u8>>,
    #[arg(long)]
    pub isi: Option<f64>,
    #[arg(long)]
    pub counterbalance: Option<usize>,
    #[arg(long)]
    pub jitter_deg: Option<f64>,
    #[arg(long)]
    pub lead_in: Option<f64>,

    // tuning and signal
    #[arg(long)]
    pub tuning_exponent: Option<i32>,
    #[arg(long)]
    pub alpha_freq: Option<f64>,
    #[arg(long)]
    pub signal_uv: Option<f64>,
    #[arg(long)]
    pub structured_weight: Option<f64>,
    #[arg(long)]
    pub random_weight: Option<f64>,
    #[arg(long)]
    pub marker_lag_ms: Option<f64>,

    // modulation
    #[arg(long)]
    pub ramp_duration: Option<f64>,
    #[arg(long)]
    pub distractor_delay: Option<f64>,
    #[arg(long)]
    pub dip_start: Option<f64>,
    #[arg(long)]
    pub dip_end: Option<f64>,
    #[arg(long)]
    pub dip_depth: Option<f64>,
    #[arg(long)]
    pub active_end: Option<f64>,

    // noise
    #[arg(long)]
    pub alpha_uv: Option<f64>,
    #[arg(long)]
    pub pink_uv: Option<f64>,
    #[arg(long)]
    pub pink_exponent: Option<f64>,
    #[arg(long)]
    pub white_uv: Option<f64>,
    #[arg(long)]
    pub n_pink_sources: Option<usize>,
    #[arg(long)]
    pub n_alpha_sources: Option<usize>,
    #[arg(long)]
    pub source_width: Option<f64>,

    // evoked
    #[arg(long)]
    pub evoked_uv: Option<f64>,
    #[arg(long)]
    pub evoked_latency: Option<f64>,
    #[arg(long)]
    pub evoked_width: Option<f64>,
}
