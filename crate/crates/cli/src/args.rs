use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "hs3", version, about = "Hierarchical class-set supervision experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Render a synthetic dataset with a planted class hierarchy.
    GenData(GenDataArgs),
    /// Derive a supervision plan from per-stage confusion matrices.
    Derive(DeriveArgs),
    /// Train the toy network.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
}

#[derive(Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 400)]
    pub count: usize,
    /// Index of the first scene; disjoint ranges give disjoint sets.
    #[arg(long, default_value_t = 0)]
    pub first: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 3)]
    pub groups: usize,
    #[arg(long, default_value_t = 4)]
    pub classes_per_group: usize,
    #[arg(long, default_value_t = 3)]
    pub min_shapes: usize,
    #[arg(long, default_value_t = 6)]
    pub max_shapes: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// Also write the planted class-to-group map as ClusterMap JSON.
    #[arg(long)]
    pub hierarchy_out: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectorArg {
    Ratio,
    Theta,
}

#[derive(Args, Serialize)]
pub struct SelectorArgs {
    /// Selection rule; defaults to theta when --theta is given, else ratio.
    #[arg(long, value_enum)]
    pub selector: Option<SelectorArg>,
    /// Angle of the selection line in degrees, 0..=90.
    #[arg(long)]
    pub theta: Option<f64>,
    /// Plot-space scale of the class-count axis (default 1/K).
    #[arg(long)]
    pub axis_x: Option<f64>,
    /// Plot-space scale of the mIoU axis (default 1).
    #[arg(long)]
    pub axis_y: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusteringArg {
    Spectral,
    Kmeans,
    Manual,
}

#[derive(Args, Serialize)]
pub struct DeriveArgs {
    /// Confusion CSV of an intermediate head, shallowest first (repeatable).
    #[arg(long = "stage", required = true)]
    pub stages: Vec<PathBuf>,
    /// Confusion CSV of the final head.
    #[arg(long = "final")]
    pub final_conf: PathBuf,
    #[command(flatten)]
    pub selector: SelectorArgs,
    /// Loss weight per intermediate stage (repeatable; default 0.4 each).
    #[arg(long = "gamma")]
    pub gammas: Vec<f64>,
    #[arg(long, value_enum, default_value_t = ClusteringArg::Spectral)]
    pub clustering: ClusteringArg,
    /// Deep-supervision checkpoint whose head weights embed the classes (kmeans).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Symmetrize raw counts instead of row-normalized confusion.
    #[arg(long)]
    pub raw_affinity: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub plan_out: PathBuf,
    #[arg(long)]
    pub curves_out: PathBuf,
    /// Points of every stage's selection line, for plotting.
    #[arg(long)]
    pub line_out: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Final head only.
    None,
    /// Every intermediate head on the full class set.
    Ds,
    /// Intermediate heads on planned class sets.
    Hs3,
    /// Hs3 plus contextual fusion of the intermediate features.
    Hs3fuse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FuseModeArg {
    Concat,
    Add,
}

#[derive(Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Validation set scored after every epoch.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Variant::Ds)]
    pub variant: Variant,
    /// Supervision plan JSON for hs3 variants.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Derive the plan from a deep-supervision run on a reduced split first.
    #[arg(long)]
    pub two_phase: bool,
    #[command(flatten)]
    pub selector: SelectorArgs,
    #[arg(long = "gamma")]
    pub gammas: Vec<f64>,
    #[arg(long, value_enum, default_value_t = ClusteringArg::Spectral)]
    pub clustering: ClusteringArg,
    #[arg(long, default_value_t = 0.9)]
    pub reduced_fraction: f64,
    /// Start the second phase from the first-phase weights.
    #[arg(long)]
    pub warm_start: bool,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Bound on the global gradient norm per step.
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Channel scale of the fusion blocks, in (0, 1].
    #[arg(long, default_value_t = 1.0)]
    pub fuse_scale: f64,
    #[arg(long, value_enum, default_value_t = FuseModeArg::Concat)]
    pub fuse_mode: FuseModeArg,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub history: PathBuf,
    /// Directory for plan, curves and analysis confusions of a two-phase run.
    #[arg(long)]
    pub artifacts: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// ClusterMap JSON; adds metrics over merged classes.
    #[arg(long)]
    pub map: Option<PathBuf>,
    /// Metrics JSON path.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the confusion matrix as CSV.
    #[arg(long)]
    pub confusion_out: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}
