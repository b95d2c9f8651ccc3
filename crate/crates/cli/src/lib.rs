//! The `infinet` command line tool.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use infinet::checkpoint::CheckpointError;
use infinet::inference::InferenceError;
use infinet::phantom::PhantomError;
use infinet::training::TrainError;
use infinet::volume::{Axis, VolumeError};
use infinet::{Arch, TensorError};

pub mod commands;
pub mod pgm;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl From<VolumeError> for CliError {
    fn from(e: VolumeError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PhantomError> for CliError {
    fn from(e: PhantomError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        match e {
            InferenceError::Tensor(t) => t.into(),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else if let TrainError::Config(_) = e {
            CliError::Usage(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "infinet", version, about = "Multi-modal slice segmentation with InfiNet")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic two-modality phantom (.ivol).
    GenPhantom(GenPhantomArgs),
    /// Train one view, or all three.
    Train(TrainArgs),
    /// Segment a volume with one to three view checkpoints.
    Infer(InferArgs),
    /// Per-class Dice of a prediction against ground truth.
    Evaluate(EvaluateArgs),
    /// Finite-difference check of every backward rule.
    GradCheck(GradCheckArgs),
    /// Write each slice along an axis as a plain PGM image.
    ExportSlices(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GenPhantomArgs {
    /// `key = value` phantom spec; defaults to the built-in iso-intense spec.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Override the grid size, e.g. `32,32,32`.
    #[arg(long, value_parser = parse_dims)]
    pub dims: Option<[usize; 3]>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ViewArg {
    Axial,
    Coronal,
    Sagittal,
    All,
}

impl ViewArg {
    pub fn axis(self) -> Option<Axis> {
        match self {
            ViewArg::Axial => Some(Axis::Axial),
            ViewArg::Coronal => Some(Axis::Coronal),
            ViewArg::Sagittal => Some(Axis::Sagittal),
            ViewArg::All => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ArchArg {
    DualArm,
    SingleArm,
}

impl From<ArchArg> for Arch {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::DualArm => Arch::DualArm,
            ArchArg::SingleArm => Arch::SingleArm,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` training config; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of .ivol training volumes.
    #[arg(long)]
    pub data_dir: PathBuf,
    /// View to train; `all` trains three independent models. Defaults to the config's view.
    #[arg(long, value_enum)]
    pub view: Option<ViewArg>,
    /// Output directory for checkpoints and reports.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint (single view only). Only --max-epochs
    /// overrides the checkpoint's stored config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Train the three views on separate threads.
    #[arg(long)]
    pub parallel: bool,
    /// Initial learning rate [default: 0.01]
    #[arg(long)]
    pub lr0: Option<f64>,
    /// Learning rate divisor [default: 10]
    #[arg(long)]
    pub lr_decay_factor: Option<f64>,
    /// Epochs between learning rate decays [default: 10]
    #[arg(long)]
    pub lr_decay_every: Option<usize>,
    /// Momentum [default: 0.95]
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Slices per batch [default: 8]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// [default: 100]
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Epochs without improvement before stopping, 0 disables [default: 10]
    #[arg(long)]
    pub patience: Option<usize>,
    /// [default: 1e-4]
    #[arg(long)]
    pub min_improvement: Option<f64>,
    /// [default: dual-arm]
    #[arg(long, value_enum)]
    pub arch: Option<ArchArg>,
    /// Channels per conv layer [default: 64]
    #[arg(long)]
    pub base_channels: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// One to three checkpoints, each trained on a different view.
    #[arg(long, num_args = 1..=3, required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub volume: PathBuf,
    /// Output label volume (.ilbl).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write per-view and aggregated probability volumes here.
    #[arg(long)]
    pub prob_dir: Option<PathBuf>,
    /// Slices per forward pass.
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Predicted labels (.ilbl or .ivol).
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground truth (.ivol or .ilbl).
    #[arg(long)]
    pub truth: PathBuf,
    /// Also write the JSON report here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// `all` or one op name.
    #[arg(long, default_value = "all")]
    pub op: String,
    #[arg(long, default_value_t = 3)]
    pub trials: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the JSON summary here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// .ivol or .ilbl file.
    #[arg(long)]
    pub volume: PathBuf,
    #[arg(long, value_parser = parse_axis)]
    pub axis: Axis,
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split([',', 'x', ' '])
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| format!("bad dimension `{p}`")))
        .collect::<Result<_, _>>()?;
    match v.as_slice() {
        [a] => Ok([*a; 3]),
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err("expected D,H,W or a single size".into()),
    }
}

fn parse_axis(s: &str) -> Result<Axis, String> {
    s.parse()
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenPhantom(a) => commands::gen_phantom(&a),
        Command::Train(a) => commands::train(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::GradCheck(a) => commands::grad_check(&a),
        Command::ExportSlices(a) => commands::export_slices(&a),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
