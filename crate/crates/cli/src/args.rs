//! Command-line surface. Numeric training and optimizer parameters are
//! optional; stages fall back to the library defaults so the flags only
//! need spelling out when deviating from them.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "reloc-kit",
    version,
    about = "Synthetic RGB-D relocalization pipeline",
    long_about = "Generates a synthetic RGB-D dataset, computes reprojection-overlap \
similarity, trains a patch encoder and a graph network on it, mines loop-closure \
candidates, refines the trajectory with pose-graph optimization, and evaluates the \
result. Stages exchange artifacts through files, so each can run and be inspected \
independently."
)]
pub struct Cli {
    /// Worker-thread cap for parallel stages; falls back to the
    /// RELOC_KIT_THREADS environment variable, then to all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Render a synthetic RGB-D dataset (images, depth, poses, intrinsics).
    Gen(GenArgs),
    /// Compute the all-pairs reprojection-overlap similarity matrix.
    Iou(IouArgs),
    /// Train the patch encoder against a similarity matrix.
    TrainEncoder(TrainEncoderArgs),
    /// Encode every keyframe into an embedding code.
    Embed(EmbedArgs),
    /// Train the graph network on embeddings plus similarity labels.
    TrainGnn(TrainGnnArgs),
    /// Mine loop-closure candidates with sliding-window sub-graph queries.
    Query(QueryArgs),
    /// Refine a drifted odometry trajectory with pose-graph optimization.
    Optimize(OptimizeArgs),
    /// Report trajectory error and, optionally, similarity-heatmap error.
    Eval(EvalArgs),
    /// Run every stage in order with one seed.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
pub struct GenArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Render seed; fixed seed means byte-identical output.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Scene description (TOML); omitted, a built-in corridor scene is used.
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

#[derive(Args)]
pub struct IouArgs {
    /// Dataset directory from `gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Count projected points even when they land behind the target surface.
    #[arg(long)]
    pub no_occlusion: bool,
}

#[derive(Args)]
pub struct TrainEncoderArgs {
    /// Dataset directory from `gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Similarity matrix CSV from `iou` used as the regression target.
    #[arg(long)]
    pub truth: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Seed for weight init, feature selection, and batch sampling.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Square patch side length in pixels.
    #[arg(long, default_value_t = 16)]
    pub scale: u32,
    /// Feature (and patch) budget per keyframe.
    #[arg(long, default_value_t = 40)]
    pub budget: usize,
    /// Optimizer steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
}

#[derive(Args)]
pub struct EmbedArgs {
    /// Dataset directory from `gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Trained encoder from `train-encoder`; the patch scale is derived
    /// from its input dimension.
    #[arg(long)]
    pub encoder: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Must match the value used during training for identical patches.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Must match the value used during training for identical patches.
    #[arg(long, default_value_t = 40)]
    pub budget: usize,
}

#[derive(Args)]
pub struct TrainGnnArgs {
    /// Embeddings CSV from `embed`.
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Similarity matrix CSV from `iou`; rows become soft match labels.
    #[arg(long)]
    pub truth: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Weight-initialization seed.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Optimizer steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Smoothing constant of the pairwise score.
    #[arg(long)]
    pub eta: Option<f64>,
}

#[derive(Args)]
pub struct QueryArgs {
    /// Embeddings CSV from `embed`.
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Trained network from `train-gnn`.
    #[arg(long)]
    pub gnn: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Query window length in keyframes.
    #[arg(long, default_value_t = 5)]
    pub window: usize,
    /// Keyframes adjacent to the window excluded from matching, so
    /// candidates are revisits rather than temporal neighbors.
    #[arg(long, default_value_t = 5)]
    pub min_separation: usize,
    /// Smoothing constant of the pairwise score.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Minimum score for a match to be kept; omitted, the 90th percentile
    /// of each window's scores is used.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Args)]
pub struct OptimizeArgs {
    /// Dataset directory from `gen` (supplies ground-truth poses).
    #[arg(long)]
    pub data: PathBuf,
    /// Loop-closure candidates CSV from `query`.
    #[arg(long)]
    pub matches: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Odometry-noise seed.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Odometry translation noise, meters per axis per step.
    #[arg(long, default_value_t = 0.02)]
    pub sigma_t: f64,
    /// Odometry rotation noise, radians per axis per step.
    #[arg(long, default_value_t = 0.01)]
    pub sigma_r: f64,
    /// Optimizer iteration cap.
    #[arg(long)]
    pub max_iterations: Option<usize>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Estimated trajectory (text, one `time tx ty tz qx qy qz qw` row per frame).
    #[arg(long)]
    pub est: PathBuf,
    /// Ground-truth trajectory in the same format.
    #[arg(long)]
    pub gt: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Second trajectory to score for comparison (e.g. raw odometry).
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Skip the closed-form rigid alignment before scoring.
    #[arg(long)]
    pub no_align: bool,
    /// Predicted similarity CSV for heatmap comparison (needs --truth).
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Ground-truth similarity CSV for heatmap comparison (needs --pred).
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Args)]
pub struct PipelineArgs {
    /// Root output directory; each stage writes to a subdirectory.
    #[arg(long)]
    pub out: PathBuf,
    /// One seed driving every stage.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Scene description (TOML); omitted, the built-in corridor is used.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Encoder training steps.
    #[arg(long, default_value_t = 900)]
    pub encoder_steps: usize,
    /// Graph-network training steps.
    #[arg(long, default_value_t = 500)]
    pub gnn_steps: usize,
    /// Odometry translation noise, meters per axis per step.
    #[arg(long, default_value_t = 0.02)]
    pub sigma_t: f64,
    /// Odometry rotation noise, radians per axis per step.
    #[arg(long, default_value_t = 0.01)]
    pub sigma_r: f64,
}
