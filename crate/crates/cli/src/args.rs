use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "vagnet", version, about = "Accident-anticipation head: train, evaluate, infer, profile")]
pub struct Cli {
    /// TOML file with optional [model], [train] and [synth] tables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train on the `train` split of a manifest.
    Train(TrainArgs),
    /// Score a manifest split with a checkpoint and report AP / mTTA.
    Eval(EvalArgs),
    /// Print the per-frame risk trace of one feature file.
    Infer(InferArgs),
    /// Print the analytic per-frame FLOPs of the head.
    Flops(FlopsArgs),
    /// Write a synthetic dataset (feature files plus manifest).
    Synth(SynthArgs),
}

/// Model overrides shared by several subcommands.
#[derive(Args, Debug, Default, Clone)]
pub struct ModelOverrides {
    #[arg(long)]
    pub d_model: Option<usize>,
    /// Encoder lookback (window holds u+1 frames).
    #[arg(long)]
    pub u: Option<usize>,
    /// Graph neighbors per frame.
    #[arg(long)]
    pub v: Option<usize>,
    /// Encoder layers.
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for the checkpoint, log and resolved config.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelOverrides,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Validate on the `val` split every N epochs.
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Keep the checkpoint with the best validation AP as best.vagw.
    #[arg(long)]
    pub keep_best: bool,
    /// Run grouped k-fold cross-validation over the train split instead.
    #[arg(long)]
    pub folds: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Where to write the JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Number of evenly spaced thresholds in (0, 1).
    #[arg(long, default_value_t = 99)]
    pub grid: usize,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// VAGF feature file.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Score frame by frame, printing each line as soon as it is ready.
    #[arg(long)]
    pub stream: bool,
    /// Report head latency in ms/frame on stderr.
    #[arg(long)]
    pub timing: bool,
}

#[derive(Args, Debug)]
pub struct FlopsArgs {
    #[command(flatten)]
    pub model: ModelOverrides,
    #[arg(long)]
    pub input_dim: Option<usize>,
    /// Clip length used to average the graph neighbor count.
    #[arg(long, default_value_t = 50)]
    pub frames: usize,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_clips: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub fps: Option<f32>,
    #[arg(long)]
    pub drift: Option<f32>,
    #[arg(long)]
    pub noise: Option<f32>,
    /// Fraction of source groups tagged `test`.
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
}
