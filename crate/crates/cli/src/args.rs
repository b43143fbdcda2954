use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "mabn", version, about = "Small-batch normalization experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the toy conv net and write curves, traces, summaries, and checkpoints.
    Train(TrainArgs),
    /// Error rates of a checkpoint on the inference path.
    Evaluate(EvaluateArgs),
    /// Finite-difference check of a normalization backward pass.
    Gradcheck(GradcheckArgs),
    /// Monte Carlo check of the estimator-variance and gradient-variance results.
    VerifyTheorem(TheoremArgs),
    /// Inference throughput of folded, unfolded, and instance-normalized stacks.
    Bench(BenchArgs),
    /// Statistic-norm traces at several normalization batch sizes.
    StatsTrace(StatsTraceArgs),
    /// Check that folding normalizers into convolutions preserves outputs.
    Fold(FoldArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; omitted sections take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (default: $MABN_OUT_DIR, then ./out).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Comma-separated seeds; several seeds also write a median summary.
    #[arg(long, value_delimiter = ',', conflicts_with = "resume")]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, conflicts_with = "resume")]
    pub iterations: Option<u64>,
    /// Save a checkpoint once this iteration is reached and stop.
    #[arg(long)]
    pub stop_at: Option<u64>,
    /// Continue from a checkpoint written by `--stop-at`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluate with normalizers folded into the convolutions.
    #[arg(long)]
    pub folded: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LayerKind {
    /// Mean-centered batch normalization.
    Bn,
    /// Second-moment normalization without centering.
    Modified,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "bn")]
    pub layer: LayerKind,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    /// Height and width of each feature map.
    #[arg(long, default_value_t = 2)]
    pub spatial: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TheoremKind {
    /// Exponential moving average variance.
    Ema,
    /// Simple moving average variance.
    Sma,
    /// Backward-pass variance gap between the two normalization forms.
    Gap,
}

#[derive(Debug, Args)]
pub struct TheoremArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub which: TheoremKind,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    /// Per-step drift of the source mean.
    #[arg(long)]
    pub drift: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// 10^5 trials at a 3% tolerance for the estimator checks.
    #[arg(long)]
    pub tight: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub spatial: Option<usize>,
    #[arg(long)]
    pub kernel: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct StatsTraceArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_delimiter = ',', default_value = "2,32")]
    pub norm_batches: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub iterations: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FoldArgs {
    #[command(flatten)]
    pub common: Common,
    /// Fold a trained checkpoint instead of a random stack.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Largest accepted absolute output difference.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}
