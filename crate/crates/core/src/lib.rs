//! Estimation of the refractive-index structure constant Cn2 from image
//! sequences.
//!
//! The crate bundles the classical image-gradient estimator, a trainable
//! physics-constrained network built on a small reverse-mode autodiff
//! engine, a tilt-statistics turbulence simulator used as ground truth, a
//! two-stage motion stabilizer, dataset ingestion, and the evaluation
//! protocols (interpolation, k-fold extrapolation, model transfer).

pub mod autodiff;
pub mod error;
pub mod estimator;
pub mod eval;
mod fft;
pub mod geometry;
pub mod imaging;
pub mod ingest;
pub mod models;
pub mod stabilize;
pub mod turbsim;

pub use error::{Error, Result};
pub use estimator::{estimate_cn2, estimate_series, Cn2Estimate, GradientEstimator, Reduction};
pub use eval::{
    run_protocol, Dataset, MetricDomain, MetricReport, MetricSet, ProtocolReport, SplitSpec,
};
pub use geometry::{geometry_scalar, CameraGeometry};
pub use imaging::{GradientKernel, ImageFrame, ImageSequence, Plane, RgbFrame, Roi};
pub use ingest::{DatasetManifest, FrameEntry, ScintRecord};
pub use models::{
    AnyModel, BaselineCnn, LossDomain, Model, ModelKind, PhysicsGradNet, TrainConfig,
};
pub use stabilize::{RigidShift, StabilizeConfig};
pub use turbsim::{simulate_sequence, tilt_sigma_px, Scene, SimConfig};
