use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use cn2_core::models::OptimizerKind;
use cn2_core::{CameraGeometry, GradientKernel, LossDomain, Roi, Scene};
use serde::{Deserialize, Serialize};

/// Cn2 estimation from image sequences.
#[derive(Debug, Parser)]
#[command(name = "cn2", version, about, propagate_version = true)]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug). RUST_LOG takes precedence.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

/// Every subcommand. The value is echoed to `config.json` in the output
/// directory so a run can be replayed.
#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Command {
    /// Simulate turbulent image sequences with known Cn2.
    Simulate(SimulateArgs),
    /// Remove camera motion from every minute of a dataset.
    Stabilize(StabilizeArgs),
    /// Estimate Cn2 with a gradient kernel or a trained model.
    Estimate(EstimateArgs),
    /// Train a model on every minute of a dataset.
    Train(TrainArgs),
    /// Run an evaluation protocol and score the predictions.
    Evaluate(EvaluateArgs),
    /// Score a predictions CSV and plot it.
    Report(ReportArgs),
    /// Convert or cache datasets.
    #[command(subcommand)]
    Ingest(IngestCommand),
    /// Re-run the command recorded in a config.json.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum IngestCommand {
    /// Build a manifest and scintillometer CSV from raw frames and a log.
    Convert(ConvertArgs),
    /// Crop every frame of a manifest to an ROI and cache the result.
    Cache(CacheArgs),
}

// ---------------------------------------------------------------------------
// Shared groups
// ---------------------------------------------------------------------------

/// Overrides for individual camera geometry fields.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
pub struct GeometryArgs {
    /// Pixel field of view, radians.
    #[arg(long)]
    pub pfov: Option<f64>,
    /// Aperture diameter, metres.
    #[arg(long)]
    pub aperture: Option<f64>,
    /// Path length to the scene, metres.
    #[arg(long)]
    pub distance: Option<f64>,
    /// Path-weighting constant of the tilt model.
    #[arg(long)]
    pub turbulence_p: Option<f64>,
}

impl GeometryArgs {
    pub fn apply(&self, base: CameraGeometry) -> cn2_core::Result<CameraGeometry> {
        CameraGeometry::new(
            self.pfov.unwrap_or(base.pfov),
            self.aperture.unwrap_or(base.aperture_d),
            self.distance.unwrap_or(base.path_length_l),
            self.turbulence_p.unwrap_or(base.turbulence_p),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainingArgs {
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    /// Learning rate; 0 evaluates the initial weights without training.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 3)]
    pub batch_size: usize,
    /// Seed for the batch order.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed for the initial weights.
    #[arg(long, default_value_t = 0)]
    pub init_seed: u64,
    #[arg(long, value_enum, default_value_t = LossArg::Log10)]
    pub loss_domain: LossArg,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
    /// Frames per physics-model prediction.
    #[arg(long, default_value_t = 10)]
    pub n_frames: usize,
    /// Centre crop applied before the physics model; the full frame when absent.
    #[arg(long)]
    pub roi_size: Option<usize>,
}

impl TrainingArgs {
    pub fn train_config(&self) -> cn2_core::TrainConfig {
        cn2_core::TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            loss_domain: self.loss_domain.into(),
            optimizer: self.optimizer.into(),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossArg {
    Log10,
    Linear,
}

impl From<LossArg> for LossDomain {
    fn from(v: LossArg) -> Self {
        match v {
            LossArg::Log10 => LossDomain::Log10,
            LossArg::Linear => LossDomain::Linear,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

impl From<OptimizerArg> for OptimizerKind {
    fn from(v: OptimizerArg) -> Self {
        match v {
            OptimizerArg::Adam => OptimizerKind::Adam,
            OptimizerArg::Sgd => OptimizerKind::Sgd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelArg {
    Physics,
    Baseline,
    Classical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolArg {
    Interpolation,
    Kfold,
    Transfer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneArg {
    /// Gaussian-smoothed noise.
    Smooth,
    /// Blurred checkerboard.
    Board,
    /// Horizontal intensity ramp.
    Ramp,
}

// ---------------------------------------------------------------------------
// Subcommand arguments
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    /// Cn2 of each simulated minute, comma separated.
    #[arg(long, required = true, value_delimiter = ',', num_args = 1..)]
    pub cn2: Vec<f64>,
    /// Frames per minute.
    #[arg(long, default_value_t = 100)]
    pub frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Frame side, pixels.
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long, value_enum, default_value_t = SceneArg::Smooth)]
    pub scene: SceneArg,
    /// Smoothing scale of the noise scene, pixels.
    #[arg(long, default_value_t = 16.0)]
    pub feature_scale: f64,
    /// Peak-to-peak contrast of noise and board scenes.
    #[arg(long, default_value_t = 0.8)]
    pub contrast: f64,
    /// Checkerboard square, pixels.
    #[arg(long, default_value_t = 32)]
    pub square: usize,
    /// Checkerboard blur, pixels.
    #[arg(long, default_value_t = 2.0)]
    pub blur: f64,
    /// Ramp slope per pixel.
    #[arg(long, default_value_t = 0.003)]
    pub slope: f64,
    /// Radius of the random camera shake, pixels.
    #[arg(long, default_value_t = 0.0)]
    pub motion: f64,
    /// Smoothing scale of the tilt field, pixels.
    #[arg(long, default_value_t = 32.0)]
    pub correlation_length: f64,
    /// Timestamp of the first minute (ISO-8601).
    #[arg(long, default_value = "2024-01-01T00:00:00Z")]
    pub start: String,
    #[arg(long, default_value = "sim")]
    pub dataset_id: String,
    #[command(flatten)]
    pub geometry: GeometryArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

impl SimulateArgs {
    pub fn scene(&self) -> Scene {
        match self.scene {
            SceneArg::Smooth => Scene::SmoothNoise {
                feature_scale: self.feature_scale,
                contrast: self.contrast,
            },
            SceneArg::Board => Scene::TargetBoard {
                square: self.square,
                blur: self.blur,
                contrast: self.contrast,
            },
            SceneArg::Ramp => Scene::Ramp { slope: self.slope },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct StabilizeArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Anchor patch (x0,y0,size) for the coarse stage; coarse is skipped without it.
    #[arg(long)]
    pub anchor: Option<Roi>,
    /// Reference frame within each minute; the middle frame by default.
    #[arg(long)]
    pub reference: Option<usize>,
    /// Largest accepted shift, pixels.
    #[arg(long, default_value_t = 32.0)]
    pub max_shift: f64,
    /// Minimum normalized correlation of the coarse match.
    #[arg(long, default_value_t = 0.3)]
    pub ncc_threshold: f64,
    #[arg(long)]
    pub no_coarse: bool,
    #[arg(long)]
    pub no_fine: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EstimateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Gradient kernel: sobel, prewitt, central or intermediate.
    #[arg(long, default_value = "central")]
    pub kernel: GradientKernel,
    /// Estimation ROI as x0,y0,size; a centred ROI of up to 256 by default.
    #[arg(long)]
    pub roi: Option<Roi>,
    /// Frames per estimate; the whole minute when absent.
    #[arg(long)]
    pub group_size: Option<usize>,
    /// Use a trained model instead of the gradient kernel.
    #[arg(long, conflicts_with = "group_size")]
    pub weights: Option<PathBuf>,
    #[command(flatten)]
    pub geometry: GeometryArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = ModelArg::Physics)]
    pub model: ModelArg,
    #[command(flatten)]
    pub training: TrainingArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    #[arg(long, value_enum, default_value_t = ProtocolArg::Interpolation)]
    pub protocol: ProtocolArg,
    /// Training dataset manifest (the only dataset unless --protocol transfer).
    #[arg(long)]
    pub train: PathBuf,
    /// Test dataset manifest; required by transfer.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModelArg::Physics)]
    pub model: ModelArg,
    /// Kernel of the classical estimator.
    #[arg(long, default_value = "central")]
    pub kernel: GradientKernel,
    /// Frames per classical estimate; the whole minute when absent.
    #[arg(long)]
    pub group_size: Option<usize>,
    /// Evaluate these trained weights as they are instead of training.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Number of folds for k-fold.
    #[arg(long, default_value_t = 6)]
    pub k: usize,
    /// Consecutive training minutes per interpolation block.
    #[arg(long, default_value_t = 2)]
    pub train_block: usize,
    /// Consecutive test minutes per interpolation block.
    #[arg(long, default_value_t = 1)]
    pub test_block: usize,
    #[command(flatten)]
    pub training: TrainingArgs,
    /// Skip plot.svg.
    #[arg(long)]
    pub no_plot: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReportArgs {
    /// CSV with minute_timestamp,truth,pred columns.
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long, default_value = "Cn2 predictions")]
    pub title: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ConvertArgs {
    /// Directory of PNG or TIFF frames.
    #[arg(long)]
    pub frames_dir: PathBuf,
    /// chrono format of the frame file stems, e.g. %Y%m%d_%H%M%S%.f
    #[arg(long)]
    pub filename_format: String,
    /// Frame rate used to spread frames whose names share an instant.
    #[arg(long)]
    pub fps: Option<f64>,
    /// Scintillometer log to convert.
    #[arg(long)]
    pub scint: PathBuf,
    #[arg(long, default_value = "timestamp")]
    pub timestamp_column: String,
    #[arg(long, default_value = "cn2")]
    pub cn2_column: String,
    #[arg(long)]
    pub cn2_min_column: Option<String>,
    #[arg(long)]
    pub cn2_max_column: Option<String>,
    #[arg(long)]
    pub cn2_std_column: Option<String>,
    #[arg(long, default_value_t = ',')]
    pub delimiter: char,
    /// chrono format of the log timestamps; ISO-8601 when absent.
    #[arg(long)]
    pub timestamp_format: Option<String>,
    #[arg(long, default_value = "field")]
    pub dataset_id: String,
    #[command(flatten)]
    pub geometry: GeometryArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct CacheArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Crop as x0,y0,size.
    #[arg(long)]
    pub roi: Roi,
    /// Root directory for cached datasets.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// A config.json written by an earlier run.
    pub config: PathBuf,
}

impl Command {
    /// Directory the command writes into, where its config echo goes.
    pub fn out_dir(&self) -> Option<&PathBuf> {
        match self {
            Command::Simulate(a) => Some(&a.out),
            Command::Stabilize(a) => Some(&a.out),
            Command::Estimate(a) => Some(&a.out),
            Command::Train(a) => Some(&a.out),
            Command::Evaluate(a) => Some(&a.out),
            Command::Report(a) => Some(&a.out),
            Command::Ingest(IngestCommand::Convert(a)) => Some(&a.out),
            Command::Ingest(IngestCommand::Cache(a)) => Some(&a.out),
            Command::Replay(_) => None,
        }
    }
}
