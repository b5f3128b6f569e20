use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "meae", version, about = "Single-channel source separation with a multi-encoder autoencoder")]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on every recording in a directory.
    Train(TrainArgs),
    /// Decode source estimates for a recording from a checkpoint.
    Infer(InferArgs),
    /// Score heart rate from raw PPG and source estimates against ECG R-peaks.
    Eval(EvalArgs),
    /// Run the ICA or NMF baseline on pseudo-copies of a recording.
    Baseline(BaselineArgs),
    /// Generate synthetic scenes with ground-truth sources and beats.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML file with [model], [loss], [train] and [scene] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Upper bound on worker threads.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Where R-peaks come from: an ECG recording or a precomputed beat file.
#[derive(Debug, Clone, Args)]
#[group(required = true, multiple = false)]
pub struct Reference {
    /// ECG recording (CSV or .sig); R-peaks are detected after resampling to 125 Hz.
    #[arg(long)]
    pub ecg: Option<PathBuf>,
    /// CSV with an `r_peak` column of 125 Hz sample indices (e.g. a synth `beats.csv`).
    #[arg(long)]
    pub r_peaks: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory of recordings or synthetic scenes.
    #[arg(long)]
    pub data: PathBuf,
    /// Synthetic scenes used to track per-encoder heart-rate error each epoch.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub encoders: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Continue from an `epoch-XXXX.state` file.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Recording to separate (CSV or .sig).
    #[arg(long)]
    pub input: PathBuf,
    /// Encoder index, or `all`.
    #[arg(long, default_value = "all")]
    pub encoder: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub ppg: PathBuf,
    #[command(flatten)]
    pub reference: Reference,
    /// Source estimates at 125 Hz aligned with the PPG.
    #[arg(long = "source")]
    pub sources: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub common: Common,
    /// `ica` or `nmf`.
    #[arg(long)]
    pub method: String,
    #[arg(long)]
    pub ppg: PathBuf,
    #[command(flatten)]
    pub reference: Reference,
    /// Number of shifted pseudo-copies (and components).
    #[arg(long, default_value_t = 8)]
    pub copies: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of scenes; more than one writes `scene-XXXX` subdirectories.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Also write a synthetic ECG with QRS complexes at the R-peaks.
    #[arg(long)]
    pub ecg: bool,
}
