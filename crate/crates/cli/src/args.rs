use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "thermo", version, about = "Thermoelastic ground truth and learned surrogates", arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labelled dataset directory.
    Gen(GenArgs),
    /// Solve one temperature field to a full sample.
    Solve(SolveArgs),
    /// Train a surrogate and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate one or more checkpoints on a dataset.
    Eval(EvalArgs),
    /// Write one field of a sample as a PNG heatmap and optionally CSV.
    Export(ExportArgs),
    /// Check every sample of a dataset against the physics residual.
    Audit(AuditArgs),
}

#[derive(Debug, Args)]
pub struct BoardArgs {
    /// `default` (four reference holes), `none`, or `cx,cy,r;...` in meters.
    #[arg(long, default_value = "default")]
    pub holes: String,
    /// Side of the square board, meters.
    #[arg(long, default_value_t = thermo_core::geometry::REFERENCE_SIDE)]
    pub side: f64,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Number of training samples.
    #[arg(long)]
    pub n: usize,
    /// Validation samples, drawn after the training ones.
    #[arg(long, default_value_t = 0)]
    pub val: usize,
    /// Test samples, drawn after the validation ones.
    #[arg(long, default_value_t = 0)]
    pub test: usize,
    /// Nodes per axis.
    #[arg(long, default_value_t = 64)]
    pub grid: usize,
    /// Master seed; sample i uses seed + i.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// GRF correlation length, meters (default 0.2 x side).
    #[arg(long)]
    pub lengthscale: Option<f64>,
    /// Temperature rise range, K.
    #[arg(long, default_value_t = 0.0)]
    pub tmin: f64,
    #[arg(long, default_value_t = 100.0)]
    pub tmax: f64,
    #[command(flatten)]
    pub board: BoardArgs,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    /// Temperature as CSV (ny rows of nx values, row 0 at y = 0) or a sample file.
    #[arg(long)]
    pub temp: PathBuf,
    /// Output sample file.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub board: BoardArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    MtaUnet,
    UnetStl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BalanceArg {
    Uncertainty,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Adadelta,
    Adam,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory; its training split is used.
    #[arg(long)]
    pub data: PathBuf,
    /// Validation dataset directory (its validation split, or all samples if it has none).
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "mta-unet")]
    pub model: ModelArg,
    #[arg(long, value_enum, default_value = "on")]
    pub physics: Switch,
    /// Task balancing; by default uncertainty for the multi-task model, fixed otherwise.
    #[arg(long, value_enum)]
    pub balance: Option<BalanceArg>,
    /// Fixed weights, one per task then the physics weight, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Stop after this many optimizer steps per network.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Encoder depth D.
    #[arg(long, default_value_t = 4)]
    pub levels: usize,
    /// Channels at the first level.
    #[arg(long, default_value_t = 64)]
    pub base: usize,
    #[arg(long, value_enum, default_value = "adadelta")]
    pub optimizer: OptimizerArg,
    /// Learning rate (Adadelta default 1, Adam default 1e-3).
    #[arg(long)]
    pub lr: Option<f64>,
    /// Validate every this many epochs (0 disables).
    #[arg(long, default_value_t = 1)]
    pub val_every: usize,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Training history as JSON lines (default: checkpoint path + `.history.jsonl`).
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint; repeat to compare several models in one report.
    #[arg(long, required = true)]
    pub model: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Split to evaluate on.
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// JSON report path.
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FieldArg {
    #[value(name = "T")]
    T,
    Ux,
    Uy,
    Sxx,
    Syy,
    Sxy,
}

impl FieldArg {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        ["T", "ux", "uy", "sxx", "syy", "sxy"][self.index()]
    }
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub sample: PathBuf,
    #[arg(long, value_enum)]
    pub field: FieldArg,
    #[arg(long)]
    pub png: PathBuf,
    /// Also write ny rows of nx values, row 0 at y = 0.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Largest acceptable scaled residual loss.
    #[arg(long, default_value_t = 1e-12)]
    pub tol: f64,
}
