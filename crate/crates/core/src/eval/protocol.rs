use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{metrics, MetricDomain, MetricReport};
use super::split::{split, SplitSpec};
use crate::error::{Error, Result};
use crate::estimator::{median, GradientEstimator};
use crate::geometry::CameraGeometry;
use crate::imaging::{GradientKernel, ImageSequence, Roi};
use crate::models::{train, Model, TrainConfig, TrainReport, TrainSample};

/// All synchronized frames of one minute and that minute's ground truth.
#[derive(Debug, Clone)]
pub struct MinuteSample {
    pub minute_us: i64,
    pub truth: f64,
    pub sequence: ImageSequence,
}

/// Time-ordered minutes sharing one camera geometry.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub id: String,
    pub geometry: CameraGeometry,
    pub minutes: Vec<MinuteSample>,
}

impl Dataset {
    pub fn new(
        id: impl Into<String>,
        geometry: CameraGeometry,
        minutes: Vec<MinuteSample>,
    ) -> Result<Self> {
        geometry.validate()?;
        if minutes.is_empty() {
            return Err(Error::EmptyDataset("dataset has no minutes".into()));
        }
        if minutes.windows(2).any(|w| w[1].minute_us <= w[0].minute_us) {
            return Err(Error::Validation(
                "dataset minutes must be strictly increasing".into(),
            ));
        }
        if let Some(m) = minutes
            .iter()
            .find(|m| !(m.truth.is_finite() && m.truth > 0.0))
        {
            return Err(Error::Validation(format!(
                "minute {} has non-positive truth {}",
                m.minute_us, m.truth
            )));
        }
        Ok(Self {
            id: id.into(),
            geometry,
            minutes,
        })
    }

    pub fn len(&self) -> usize {
        self.minutes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.minutes.is_empty()
    }
}

/// Anything that turns a minute of frames into one Cn2 value.
pub trait Cn2Estimator: Clone + Send + Sync {
    fn name(&self) -> String;

    /// Learns from the training minutes. Stateless estimators do nothing.
    fn fit(&mut self, train: &[&MinuteSample], geom: &CameraGeometry) -> Result<()>;

    fn predict_minute(&self, minute: &MinuteSample, geom: &CameraGeometry) -> Result<f64>;
}

/// The classical gradient estimator, optionally applied to frame groups
/// whose results are reduced by median.
#[derive(Debug, Clone)]
pub struct ClassicalEstimator {
    pub kernel: GradientKernel,
    /// `None` centres the largest default-sized ROI that fits.
    pub roi: Option<Roi>,
    /// `None` uses every frame of the minute at once.
    pub group_frames: Option<usize>,
}

impl ClassicalEstimator {
    pub fn new(kernel: GradientKernel) -> Self {
        Self {
            kernel,
            roi: None,
            group_frames: None,
        }
    }

    fn roi_for(&self, seq: &ImageSequence) -> Result<Roi> {
        match self.roi {
            Some(r) => Ok(r),
            None => {
                let size = Roi::DEFAULT_SIZE.min(seq.width()).min(seq.height());
                Roi::centered(seq.width(), seq.height(), size)
            }
        }
    }
}

impl Cn2Estimator for ClassicalEstimator {
    fn name(&self) -> String {
        format!("gradient-{}", self.kernel.name())
    }

    fn fit(&mut self, _train: &[&MinuteSample], _geom: &CameraGeometry) -> Result<()> {
        Ok(())
    }

    fn predict_minute(&self, minute: &MinuteSample, geom: &CameraGeometry) -> Result<f64> {
        let est = GradientEstimator::new(self.kernel, self.roi_for(&minute.sequence)?, *geom);
        match self.group_frames {
            None => Ok(est.estimate(&minute.sequence)?.value),
            Some(n) => {
                let values: Vec<f64> = minute
                    .sequence
                    .chunks(n)?
                    .iter()
                    .filter_map(|g| est.estimate(g).ok().map(|e| e.value))
                    .collect();
                median(values).ok_or_else(|| {
                    Error::InsufficientSamples(format!(
                        "no usable group in minute {}",
                        minute.minute_us
                    ))
                })
            }
        }
    }
}

/// A trainable model. Every fit starts again from the initial weights.
#[derive(Debug, Clone)]
pub struct LearnedEstimator<M: Model> {
    pub initial: M,
    pub trained: Option<M>,
    pub config: TrainConfig,
    pub last_report: Option<TrainReport>,
    /// A frozen estimator keeps its weights and ignores `fit`.
    pub frozen: bool,
}

impl<M: Model> LearnedEstimator<M> {
    pub fn new(initial: M, config: TrainConfig) -> Self {
        Self {
            initial,
            trained: None,
            config,
            last_report: None,
            frozen: false,
        }
    }

    /// Wraps an already trained model.
    pub fn frozen(model: M) -> Self {
        Self {
            frozen: true,
            ..Self::new(model, TrainConfig::default())
        }
    }

    /// Splits each minute into model-sized groups and pairs them with the
    /// minute's truth.
    pub fn samples(
        &self,
        minutes: &[&MinuteSample],
        geom: &CameraGeometry,
    ) -> Result<Vec<TrainSample>> {
        let n = self.initial.n_input_frames();
        let mut out = Vec::new();
        for m in minutes {
            for g in m.sequence.chunks(n)? {
                out.push(TrainSample {
                    sequence: g,
                    geometry: *geom,
                    truth: m.truth,
                });
            }
        }
        Ok(out)
    }
}

impl<M: Model> Cn2Estimator for LearnedEstimator<M> {
    fn name(&self) -> String {
        self.initial.kind().to_string()
    }

    fn fit(&mut self, train_minutes: &[&MinuteSample], geom: &CameraGeometry) -> Result<()> {
        if self.frozen {
            return Ok(());
        }
        let samples = self.samples(train_minutes, geom)?;
        let mut model = self.initial.clone();
        let report = train(&mut model, &samples, &self.config)?;
        self.trained = Some(model);
        self.last_report = Some(report);
        Ok(())
    }

    fn predict_minute(&self, minute: &MinuteSample, geom: &CameraGeometry) -> Result<f64> {
        let model = self.trained.as_ref().unwrap_or(&self.initial);
        let groups = minute.sequence.chunks(model.n_input_frames())?;
        let values: Vec<f64> = groups
            .par_iter()
            .filter_map(|g| model.predict(g, geom).ok())
            .collect();
        median(values).ok_or_else(|| {
            Error::InsufficientSamples(format!("no usable group in minute {}", minute.minute_us))
        })
    }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub minute_us: i64,
    pub truth: f64,
    /// `None` marks a gap.
    pub pred: Option<f64>,
}

/// Metrics in both domains; a domain whose metrics are undefined is `None`
/// and its reason is kept in `notes`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub linear: Option<MetricReport>,
    pub log10: Option<MetricReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl MetricSet {
    pub fn from_predictions(preds: &[Prediction]) -> Self {
        let (p, t): (Vec<f64>, Vec<f64>) = preds
            .iter()
            .filter_map(|x| x.pred.map(|p| (p, x.truth)))
            .unzip();
        let mut set = MetricSet::default();
        match metrics(&p, &t, MetricDomain::Linear) {
            Ok(m) => set.linear = Some(m),
            Err(e) => set.notes.push(format!("linear: {e}")),
        }
        match metrics(&p, &t, MetricDomain::Log10) {
            Ok(m) => set.log10 = Some(m),
            Err(e) => set.notes.push(format!("log10: {e}")),
        }
        set
    }

    pub fn get(&self, domain: MetricDomain) -> Option<&MetricReport> {
        match domain {
            MetricDomain::Linear => self.linear.as_ref(),
            MetricDomain::Log10 => self.log10.as_ref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub index: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub metrics: MetricSet,
    pub predictions: Vec<Prediction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub protocol: String,
    pub estimator: String,
    pub train_dataset: String,
    pub test_dataset: String,
    pub folds: Vec<FoldReport>,
    /// Metrics over the predictions of all folds together.
    pub pooled: MetricSet,
    /// True when a fold failed or a test minute has no prediction.
    pub partial: bool,
}

impl ProtocolReport {
    /// Every test prediction, sorted by minute.
    pub fn predictions(&self) -> Vec<Prediction> {
        let mut all: Vec<Prediction> = self
            .folds
            .iter()
            .flat_map(|f| f.predictions.clone())
            .collect();
        all.sort_by_key(|p| p.minute_us);
        all
    }
}

fn run_fold<E: Cn2Estimator>(
    estimator: &E,
    index: usize,
    train_set: &[&MinuteSample],
    test_set: &[&MinuteSample],
    train_geom: &CameraGeometry,
    test_geom: &CameraGeometry,
) -> FoldReport {
    let mut est = estimator.clone();
    let mut report = FoldReport {
        index,
        n_train: train_set.len(),
        n_test: test_set.len(),
        metrics: MetricSet::default(),
        predictions: Vec::new(),
        error: None,
    };
    if let Err(e) = est.fit(train_set, train_geom) {
        report.error = Some(format!("fit failed: {e}"));
        report.predictions = test_set
            .iter()
            .map(|m| Prediction {
                minute_us: m.minute_us,
                truth: m.truth,
                pred: None,
            })
            .collect();
        return report;
    }
    report.predictions = test_set
        .iter()
        .map(|m| Prediction {
            minute_us: m.minute_us,
            truth: m.truth,
            pred: est.predict_minute(m, test_geom).ok(),
        })
        .collect();
    report.metrics = MetricSet::from_predictions(&report.predictions);
    report
}

/// Runs one evaluation protocol. `test` is required for transfer and must be
/// `None` otherwise.
pub fn run_protocol<E: Cn2Estimator>(
    estimator: &E,
    data: &Dataset,
    test: Option<&Dataset>,
    spec: &SplitSpec,
) -> Result<ProtocolReport> {
    let folds = match (spec, test) {
        (SplitSpec::Transfer { .. }, Some(t)) => {
            let train_set: Vec<&MinuteSample> = data.minutes.iter().collect();
            let test_set: Vec<&MinuteSample> = t.minutes.iter().collect();
            vec![run_fold(
                estimator,
                0,
                &train_set,
                &test_set,
                &data.geometry,
                &t.geometry,
            )]
        }
        (SplitSpec::Transfer { .. }, None) => {
            return Err(Error::Split(
                "transfer needs a separate test dataset".into(),
            ))
        }
        (_, Some(_)) => {
            return Err(Error::Split(format!(
                "{} splits a single dataset; drop the test dataset",
                spec.name()
            )))
        }
        (_, None) => {
            let geom = data.geometry;
            split(data.len(), spec)?
                .par_iter()
                .enumerate()
                .map(|(i, f)| {
                    let tr: Vec<&MinuteSample> =
                        f.train.iter().map(|&k| &data.minutes[k]).collect();
                    let te: Vec<&MinuteSample> = f.test.iter().map(|&k| &data.minutes[k]).collect();
                    run_fold(estimator, i, &tr, &te, &geom, &geom)
                })
                .collect()
        }
    };
    let partial = folds
        .iter()
        .any(|f| f.error.is_some() || f.predictions.iter().any(|p| p.pred.is_none()));
    let mut report = ProtocolReport {
        protocol: spec.name().to_string(),
        estimator: estimator.name(),
        train_dataset: data.id.clone(),
        test_dataset: test.map_or_else(|| data.id.clone(), |t| t.id.clone()),
        folds,
        pooled: MetricSet::default(),
        partial,
    };
    report.pooled = MetricSet::from_predictions(&report.predictions());
    Ok(report)
}
