use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// Variants are split into input/validation problems and runtime failures so
/// that callers (the CLI in particular) can map them onto distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("bounds error: {0}")]
    Bounds(String),

    #[error("insufficient frames: need at least {needed}, got {got}")]
    InsufficientFrames { needed: usize, got: usize },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("degenerate scene: {0}")]
    DegenerateScene(String),

    #[error("alignment failed on frame {frame}: peak correlation {peak:.3} below threshold {threshold:.3}")]
    AlignmentFailure {
        frame: usize,
        peak: f64,
        threshold: f64,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numerical guard tripped: {0}")]
    NumericalGuard(String),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("weight file error: {0}")]
    WeightLoad(String),

    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error("image error for {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("io error for {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input or configuration rather than by a
    /// failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Dimension(_)
                | Error::Bounds(_)
                | Error::InsufficientFrames { .. }
                | Error::InvalidValue(_)
                | Error::EmptyInput(_)
                | Error::Shape(_)
                | Error::Config(_)
                | Error::Split(_)
                | Error::Parse { .. }
                | Error::Validation(_)
        )
    }
}
