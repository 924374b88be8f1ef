use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "sinkdiag",
    version,
    about = "Attention sink and diagonal-pattern diagnostics"
)]
pub struct Cli {
    /// Output directory.
    #[arg(
        long,
        global = true,
        env = "SINKDIAG_OUT",
        default_value = "sinkdiag-out"
    )]
    pub out: PathBuf,
    /// Run without the thread pool.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-head mass profile, uniformity, BOS alignment and value rank.
    Analyze(AnalyzeArgs),
    /// Label heads as sink, diagonal, sink+lower-diagonal or other.
    Classify(ClassifyArgs),
    /// Cosine-similarity curves under interpolated attention, or the
    /// anti-oversmoothing dynamics on synthetic tokens.
    Oversmooth(OversmoothArgs),
    /// Build explicit sink or diagonal weights and verify them.
    Construct(ConstructArgs),
    /// Evaluate the sink-versus-diagonal cost bounds.
    Bounds(BoundsArgs),
    /// Train one block with a prescribed attention pattern.
    Train(TrainArgs),
    /// Train over a grid of task sizes.
    Sweep(SweepArgs),
    /// BOS-alignment quartiles and sink-representability checks.
    Geometry(GeometryArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum TaskKind {
    Backcopy,
    Generic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum PatternArg {
    Sink,
    #[value(alias = "diag")]
    Diagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum ModeArg {
    Soft,
    Forced,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TaskArgs {
    #[arg(long, value_enum, default_value = "backcopy")]
    pub task: TaskKind,
    /// Embedding dimension; backcopy defaults to the smallest admissible d.
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long, default_value_t = 10.0)]
    pub kappa: f64,
    /// Backcopy: number of dormant tokens.
    #[arg(long, default_value_t = 5)]
    pub n_dormant: usize,
    /// Backcopy: number of copy-paste tokens.
    #[arg(long, default_value_t = 5)]
    pub n_copy: usize,
    /// Backcopy: use a random orthogonal frame with this seed.
    #[arg(long)]
    pub frame_seed: Option<u64>,
    /// Grouped task: number of groups.
    #[arg(long, default_value_t = 3)]
    pub groups: usize,
    #[arg(long, default_value_t = 0.0)]
    pub phi: f64,
    #[arg(long, default_value_t = 0.3)]
    pub delta: f64,
    #[arg(long, default_value_t = 0.1)]
    pub eps: f64,
    #[arg(long, default_value_t = 3)]
    pub dormant_per_group: usize,
    /// Dimension of the shared nuisance subspace; orthogonal nuisance
    /// directions per dormant token when absent.
    #[arg(long)]
    pub nuisance_rank: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub geometry_seed: u64,
    /// Sequences in the dataset.
    #[arg(long, default_value_t = 32)]
    pub n_seqs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DumpArgs {
    /// ATND dump file.
    #[arg(long)]
    pub dump: PathBuf,
    /// Leave the BOS query row out of mass profiles.
    #[arg(long)]
    pub exclude_bos_row: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub input: DumpArgs,
    /// Relative singular-value cutoff for value ranks.
    #[arg(long, default_value_t = 1e-3)]
    pub rank_tol: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct ClassifyArgs {
    #[command(flatten)]
    pub input: DumpArgs,
    /// `default` or four comma-separated values: sink,diag,dual_joint,dual_lower_frac.
    #[arg(long, default_value = "default")]
    pub thresholds: String,
}

#[derive(Debug, Args, Serialize)]
pub struct OversmoothArgs {
    /// Estimate token statistics per head from a dump; synthetic dynamics
    /// otherwise.
    #[arg(long)]
    pub dump: Option<PathBuf>,
    /// Points on the λ grid.
    #[arg(long, default_value_t = 21)]
    pub lambda_points: usize,
    /// Skip strength β in the similarity model; estimated when absent.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, default_value_t = 16)]
    pub d: usize,
    #[arg(long = "T", alias = "t", default_value_t = 8)]
    pub t: usize,
    #[arg(long, default_value_t = 50)]
    pub layers: usize,
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct ConstructArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    /// Context length (tokens after BOS).
    #[arg(long = "T", alias = "t")]
    pub t: Option<usize>,
    #[arg(long, value_enum, default_value = "sink")]
    pub pattern: PatternArg,
    /// Verify with hard attention at this margin (defaults to κ).
    #[arg(long)]
    pub verify_kappa: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct BoundsArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    /// Context length (tokens after BOS).
    #[arg(long = "T", alias = "t")]
    pub t: Option<usize>,
    /// Backcopy: the free constant c₁; defaults to its minimum.
    #[arg(long)]
    pub c1: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OptimArgs {
    #[arg(long, value_enum, default_value = "forced")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 6000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.02)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-2)]
    pub reg: f64,
    #[arg(long, default_value_t = 100.0)]
    pub margin_penalty: f64,
    #[arg(long, default_value_t = 0.05)]
    pub margin_slack: f64,
    #[arg(long, default_value_t = 0.0)]
    pub pattern_penalty: f64,
    /// Weight of the query/key factors in the regularizer (default √d).
    #[arg(long)]
    pub qk_scale: Option<f64>,
    /// Plain gradient descent instead of Adam.
    #[arg(long)]
    pub gd: bool,
    /// Train on one fixed batch instead of a fresh batch per step.
    #[arg(long)]
    pub fixed_batch: bool,
    /// Start from the explicit construction plus this much noise.
    #[arg(long)]
    pub init_construction: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    /// Context length (tokens after BOS).
    #[arg(long = "T", alias = "t")]
    pub t: Option<usize>,
    #[arg(long, value_enum, default_value = "sink")]
    pub pattern: PatternArg,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long, value_enum, default_value = "sink")]
    pub pattern: PatternArg,
    /// Context lengths: a list `8,16,32` or a range `8..64` over the ladder
    /// 8,12,16,24,32,48,64,96,128. The grouped task takes a single value.
    #[arg(long = "T", alias = "t")]
    pub ts: Option<String>,
    /// Grouped task: δ values.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.15,0.2,0.3,0.4")]
    pub deltas: Vec<f64>,
    /// Grouped task: dormant tokens per group.
    #[arg(long, value_delimiter = ',', default_value = "2,4")]
    pub counts: Vec<usize>,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct GeometryArgs {
    #[command(flatten)]
    pub input: DumpArgs,
    /// Quartiles of cos(BOS, token) per head and sequence.
    #[arg(long)]
    pub bos_alignment: bool,
    /// Check whether a bilinear score can send every query to BOS.
    #[arg(long)]
    pub sink_check: bool,
}
