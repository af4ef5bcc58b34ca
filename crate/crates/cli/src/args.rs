use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(name = "scenematch", version, about = "Scene-aware sparse keypoint matching")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset file.
    Gen(GenArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Match one pair of a dataset.
    Match(MatchArgs),
    /// Evaluate a checkpoint or a descriptor baseline on a dataset.
    Eval(EvalArgs),
    /// Render visibility and matches for one pair.
    Inspect(InspectArgs),
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    pub source_count: usize,
    #[arg(long, default_value_t = 64)]
    pub target_count: usize,
    #[arg(long, default_value_t = 640.0)]
    pub image_width: f64,
    #[arg(long, default_value_t = 480.0)]
    pub image_height: f64,
    /// Corner perturbation as a fraction of the shorter image side.
    #[arg(long, default_value_t = 0.25)]
    pub jitter: f64,
    /// Feature noise at the finest scale.
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.2)]
    pub drop: f64,
    #[arg(long, default_value_t = 0.2)]
    pub distractors: f64,
    /// Per-image global feature offset (0 disables it).
    #[arg(long, default_value_t = 0.0)]
    pub photometric_bias: f64,
    #[arg(long, default_value_t = 3.0)]
    pub reproj_threshold: f64,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub pairs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub synth: SynthArgs,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset file; pairs are generated on the fly from `--seed` when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint, using its stored configuration.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Metrics CSV; defaults to `<out>.log.csv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Stop after this many updates even if the schedule runs longer.
    #[arg(long)]
    pub stop_after: Option<usize>,
    #[arg(long, default_value_t = 32)]
    pub channels: usize,
    #[arg(long, default_value_t = 3)]
    pub layers: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 6e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 100)]
    pub warmup: usize,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 8.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub sinkhorn_iters: usize,
    #[arg(long, default_value_t = 0.2)]
    pub threshold: f64,
    #[arg(long, default_value_t = 10.0)]
    pub clip: f64,
    #[command(flatten)]
    pub synth: SynthArgs,
}

#[derive(Args, Debug)]
pub struct MatchArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub pair: usize,
    /// Matches CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub svg: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    pub threshold: f64,
    #[arg(long, default_value_t = 50)]
    pub sinkhorn_iters: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Evaluate a descriptor baseline (nn or mnn) instead of a checkpoint.
    #[arg(long)]
    pub baseline: Option<String>,
    /// Report text; the per-threshold CSV goes to `<out>.mma.csv`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    pub threshold: f64,
    #[arg(long, default_value_t = 50)]
    pub sinkhorn_iters: usize,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub pair: usize,
    #[arg(long)]
    pub svg: PathBuf,
    #[arg(long)]
    pub csv: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    pub threshold: f64,
    #[arg(long, default_value_t = 50)]
    pub sinkhorn_iters: usize,
}
