use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rope_probe_core::dims::{AblationTarget, Side};
use rope_probe_core::toy::EpochUnit;
use rope_probe_core::{Layout, OptimizerKind, ScaleMode, TaskConfig};

#[derive(Debug, Parser)]
#[command(name = "rope-probe", version, about = "Probe how rotary position embedding uses query/key dimensions")]
pub struct Cli {
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true, env = "ROPE_PROBE_THREADS", default_value_t = 1)]
    pub threads: usize,

    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the toy retrieval head and write a checkpoint plus loss curve.
    Train(TrainArgs),
    /// Per-dimension magnitudes and first/last-n ablations of a checkpoint.
    Analyze(AnalyzeArgs),
    /// Fit per-head query utility masks.
    MaskFit(MaskFitArgs),
    /// Score heads by attention mass on the context span.
    HeadScore(HeadScoreArgs),
    /// Train paired RoPE / no-RoPE runs and judge the dimension trends.
    ReproduceFig1(Fig1Args),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    pub fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScaleArg {
    InvSqrt,
    None,
}

impl From<ScaleArg> for ScaleMode {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::InvSqrt => ScaleMode::InverseSqrt,
            ScaleArg::None => ScaleMode::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LayoutArg {
    HalfSplit,
    AdjacentPairs,
}

impl From<LayoutArg> for Layout {
    fn from(l: LayoutArg) -> Self {
        match l {
            LayoutArg::HalfSplit => Layout::HalfSplit,
            LayoutArg::AdjacentPairs => Layout::AdjacentPairs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

impl From<OptimizerArg> for OptimizerKind {
    fn from(o: OptimizerArg) -> Self {
        match o {
            OptimizerArg::Adam => OptimizerKind::Adam,
            OptimizerArg::Sgd => OptimizerKind::Sgd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TargetArg {
    QueryAndKey,
    QueryOnly,
}

impl From<TargetArg> for AblationTarget {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::QueryAndKey => AblationTarget::QueryAndKey,
            TargetArg::QueryOnly => AblationTarget::QueryOnly,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SideArg {
    First,
    Last,
}

impl From<SideArg> for Side {
    fn from(s: SideArg) -> Self {
        match s {
            SideArg::First => Side::First,
            SideArg::Last => Side::Last,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Full,
    Desk,
}

impl Preset {
    pub fn config(self) -> TaskConfig {
        match self {
            Preset::Full => TaskConfig::default(),
            Preset::Desk => TaskConfig::desk(),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value = "on")]
    pub rope: Switch,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Head dimension 2D.
    #[arg(long, default_value_t = 128)]
    pub dim: usize,
    #[arg(long, default_value_t = 128)]
    pub subset: usize,
    #[arg(long = "max-pos", default_value_t = 2048)]
    pub max_pos: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long = "samples-per-epoch", default_value_t = 10_000)]
    pub samples_per_epoch: usize,
    #[arg(long, value_enum, default_value = "inv-sqrt")]
    pub scale: ScaleArg,
    #[arg(long, value_enum, default_value = "half-split")]
    pub layout: LayoutArg,
    #[arg(long, value_enum, default_value = "adam")]
    pub optimizer: OptimizerArg,
    /// Count samples per epoch as optimizer steps instead of episodes.
    #[arg(long = "epoch-in-steps")]
    pub epoch_in_steps: bool,
    #[arg(long, default_value_t = 10_000.0)]
    pub rope_base: f64,
    #[arg(long)]
    pub out: PathBuf,
}

impl TrainArgs {
    pub fn config(&self) -> TaskConfig {
        TaskConfig {
            n: self.n,
            subset_size: self.subset,
            head_dim: self.dim,
            max_position: self.max_pos,
            batch_size: self.batch,
            learning_rate: self.lr,
            samples_per_epoch: self.samples_per_epoch,
            epochs: self.epochs,
            rope_enabled: self.rope.on(),
            seed: self.seed,
            scale_mode: self.scale.into(),
            epoch_unit: if self.epoch_in_steps {
                EpochUnit::Steps
            } else {
                EpochUnit::Episodes
            },
            optimizer: self.optimizer.into(),
            layout: self.layout.into(),
            rope_base: self.rope_base,
        }
    }
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Numbers of removed dimensions, e.g. `0,8,16,32` (default: a sweep
    /// up to the head dimension).
    #[arg(long = "ablate-ns", value_delimiter = ',')]
    pub ablate_ns: Option<Vec<usize>>,
    /// Sides to ablate.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "first,last")]
    pub sides: Vec<SideArg>,
    #[arg(long, default_value_t = 2000)]
    pub episodes: usize,
    /// Seed of the evaluation episodes shared by every ablation cell.
    #[arg(long = "eval-seed", default_value_t = 0)]
    pub eval_seed: u64,
    #[arg(long, value_enum, default_value = "query-and-key")]
    pub target: TargetArg,
    /// CSV of a projection matrix (one row per head dimension, storage
    /// order) whose L1 row norms are added to the magnitude table.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "off")]
    pub svg: Switch,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MaskFitArgs {
    /// QKV snapshot containers, one head per file.
    #[arg(long, num_args = 1.., conflicts_with = "from_checkpoint")]
    pub snapshots: Vec<PathBuf>,
    /// Build snapshots from toy episodes of this checkpoint instead.
    #[arg(long = "from-checkpoint")]
    pub from_checkpoint: Option<PathBuf>,
    /// Episodes drawn with --from-checkpoint.
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    /// L1 weight (default 1/2D).
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 1.0)]
    pub init: f64,
    /// Snapshots used per head (default: all).
    #[arg(long = "per-head")]
    pub per_head: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct HeadScoreArgs {
    /// ATTN containers; records are grouped by (layer, head).
    #[arg(long, num_args = 1.., required = true)]
    pub attn: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long = "renormalize-bos", value_enum, default_value = "off")]
    pub renormalize_bos: Switch,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Fig1Args {
    #[arg(long = "scale-preset", value_enum, default_value = "desk")]
    pub scale_preset: Preset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2000)]
    pub episodes: usize,
    #[arg(long, value_enum, default_value = "on")]
    pub svg: Switch,
    #[arg(long)]
    pub out: PathBuf,
}
