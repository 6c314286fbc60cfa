use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{LossDomain, Model};
use crate::autodiff::{Adam, Graph, Optimizer, Sgd, Tensor};
use crate::error::{Error, Result};
use crate::estimator::minute_medians;
use crate::geometry::CameraGeometry;
use crate::imaging::ImageSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Zero means "evaluate only": no optimizer step is taken.
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_domain: LossDomain,
    pub optimizer: OptimizerKind,
    /// Only used by SGD.
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 30,
            batch_size: 3,
            seed: 0,
            loss_domain: LossDomain::Log10,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be >= 0, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

/// One training example: a frame group, its camera geometry and true Cn2.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub sequence: ImageSequence,
    pub geometry: CameraGeometry,
    pub truth: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss over each epoch.
    pub loss_history: Vec<f64>,
    /// Best epoch loss seen so far, so it never increases.
    pub smoothed_history: Vec<f64>,
}

/// Loss and parameter gradients of one sample.
fn sample_gradient<M: Model>(model: &M, sample: &TrainSample) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let vars = model
        .params()
        .iter()
        .map(|p| g.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let pred = model.forward(&mut g, &vars, &sample.sequence, &sample.geometry)?;
    let target = g.constant(Tensor::scalar(model.loss_domain().encode(sample.truth)))?;
    let diff = g.sub(pred, target)?;
    let loss = g.square(diff)?;
    g.backward(loss)?;
    let grads = vars
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();
    Ok((g.value(loss).item()?, grads))
}

/// Minimizes the mean squared error between prediction and truth in
/// `cfg.loss_domain`.
///
/// Per-sample gradients within a batch are computed in parallel and summed
/// in sample order, so results do not depend on the thread count. After each
/// step the parameters are rounded to `f32`. If a loss or gradient becomes
/// non-finite the model is restored to the parameters before that step and
/// [`Error::TrainingAborted`] is returned.
pub fn train<M: Model>(
    model: &mut M,
    data: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset("no training samples".into()));
    }
    if let Some(bad) = data
        .iter()
        .find(|s| !(s.truth.is_finite() && s.truth > 0.0))
    {
        return Err(Error::Validation(format!(
            "ground truth must be > 0, got {}",
            bad.truth
        )));
    }
    model.set_loss_domain(cfg.loss_domain);

    let mut optimizer: Option<Box<dyn Optimizer>> = if cfg.lr == 0.0 {
        None
    } else {
        Some(match cfg.optimizer {
            OptimizerKind::Adam => Box::new(Adam::new(cfg.lr)?),
            OptimizerKind::Sgd => Box::new(Sgd::new(cfg.lr, cfg.momentum)?),
        })
    };

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let frozen: &M = model;
            let results: Vec<Result<(f64, Vec<Vec<f64>>)>> = batch
                .par_iter()
                .map(|&i| sample_gradient(frozen, &data[i]))
                .collect();
            let mut loss_sum = 0.0;
            let mut grad_sum: Vec<Vec<f64>> = model
                .params()
                .iter()
                .map(|p| vec![0.0; p.numel()])
                .collect();
            for r in results {
                let (loss, grads) = match r {
                    Ok(v) => v,
                    Err(Error::NumericalGuard(msg)) => {
                        return Err(Error::TrainingAborted(format!("epoch {epoch}: {msg}")))
                    }
                    Err(e) => return Err(e),
                };
                loss_sum += loss;
                for (acc, g) in grad_sum.iter_mut().zip(grads) {
                    acc.iter_mut().zip(g).for_each(|(a, v)| *a += v);
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grad_sum.iter_mut().flatten().for_each(|v| *v *= scale);
            if !loss_sum.is_finite() || grad_sum.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::TrainingAborted(format!(
                    "non-finite loss in epoch {epoch}"
                )));
            }
            epoch_loss += loss_sum;

            if let Some(opt) = optimizer.as_mut() {
                let before = model.params().to_vec();
                opt.step(model.params_mut(), &grad_sum)?;
                model.params_mut().iter_mut().for_each(Tensor::round_to_f32);
                if model.params().iter().any(|p| !p.all_finite()) {
                    model.params_mut().clone_from_slice(&before);
                    return Err(Error::TrainingAborted(format!(
                        "non-finite parameters after a step in epoch {epoch}"
                    )));
                }
            }
        }
        let mean = epoch_loss / data.len() as f64;
        let best = report
            .smoothed_history
            .last()
            .map_or(mean, |b: &f64| b.min(mean));
        log::debug!("epoch {epoch}: loss {mean:.6}");
        report.loss_history.push(mean);
        report.smoothed_history.push(best);
    }
    Ok(report)
}

/// Predicts every `(minute_timestamp_us, group)` pair and reduces to the
/// per-minute median. Failed groups are skipped; a minute with no successful
/// group is a gap (`None`).
pub fn predict_minutes<M: Model>(
    model: &M,
    groups: &[(i64, ImageSequence)],
    geom: &CameraGeometry,
) -> Vec<(i64, Option<f64>)> {
    let per_group: Vec<(i64, Option<f64>)> = groups
        .par_iter()
        .map(|(minute, seq)| (*minute, model.predict(seq, geom).ok()))
        .collect();
    minute_medians(&per_group)
}
