//! Error metrics, time-series splits and the evaluation protocols that tie
//! estimators, datasets and metrics together.

mod metrics;
mod protocol;
mod scenario;
mod split;

pub use metrics::{metrics, MetricDomain, MetricReport};
pub use protocol::{
    run_protocol, ClassicalEstimator, Cn2Estimator, Dataset, FoldReport, LearnedEstimator,
    MetricSet, MinuteSample, Prediction, ProtocolReport,
};
pub use scenario::{simulated_dataset, SceneCase};
pub use split::{split, Fold, SplitSpec};
