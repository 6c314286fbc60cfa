//! Learned Cn2 estimators and their training loop.
//!
//! Two models share one [`Model`] interface: [`PhysicsGradNet`], whose only
//! learned part is the gradient-energy denominator of the classical
//! estimator, and [`BaselineCnn`], a small unconstrained convolutional
//! regressor.

mod baseline;
mod physics;
mod train;
mod weights;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::CameraGeometry;
use crate::imaging::ImageSequence;

pub use baseline::{BaselineCnn, BaselineConfig, BASELINE_FRAMES, BASELINE_SIZE};
pub use physics::{Activation, DenominatorMode, PhysicsConfig, PhysicsGradNet};
pub use train::{predict_minutes, train, OptimizerKind, TrainConfig, TrainReport, TrainSample};
pub use weights::{load_weights, save_weights, WeightHeader, WEIGHT_FORMAT_VERSION};

/// Linear-domain targets are expressed in units of this value so that the
/// squared error stays near unity.
pub const LINEAR_UNIT: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossDomain {
    #[default]
    Log10,
    Linear,
}

impl LossDomain {
    /// Maps a Cn2 value into the domain the loss is computed in.
    pub fn encode(self, cn2: f64) -> f64 {
        match self {
            LossDomain::Log10 => cn2.log10(),
            LossDomain::Linear => cn2 / LINEAR_UNIT,
        }
    }

    pub fn decode(self, v: f64) -> f64 {
        match self {
            LossDomain::Log10 => 10f64.powf(v),
            LossDomain::Linear => v * LINEAR_UNIT,
        }
    }
}

impl std::str::FromStr for LossDomain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log10" => Ok(LossDomain::Log10),
            "linear" => Ok(LossDomain::Linear),
            other => Err(Error::Config(format!("unknown loss domain '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Physics,
    Baseline,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Physics => "physics",
            ModelKind::Baseline => "baseline",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "physics" => Ok(ModelKind::Physics),
            "baseline" => Ok(ModelKind::Baseline),
            other => Err(Error::Config(format!("unknown model kind '{other}'"))),
        }
    }
}

/// A trainable Cn2 regressor.
pub trait Model: Clone + Send + Sync {
    fn kind(&self) -> ModelKind;

    /// Frames consumed per prediction.
    fn n_input_frames(&self) -> usize;

    fn loss_domain(&self) -> LossDomain;

    fn set_loss_domain(&mut self, domain: LossDomain);

    /// Parameter names and shapes in declaration order.
    fn layout(&self) -> Vec<(String, Vec<usize>)>;

    fn params(&self) -> &[Tensor];

    fn params_mut(&mut self) -> &mut [Tensor];

    /// Records the forward pass on `g` and returns the prediction encoded in
    /// [`loss_domain`](Self::loss_domain). `params` are the graph handles of
    /// [`params`](Self::params), in the same order.
    fn forward(
        &self,
        g: &mut Graph,
        params: &[Var],
        seq: &ImageSequence,
        geom: &CameraGeometry,
    ) -> Result<Var>;

    /// Cn2 prediction in m^(-2/3).
    fn predict(&self, seq: &ImageSequence, geom: &CameraGeometry) -> Result<f64> {
        let mut g = Graph::new();
        let vars = self
            .params()
            .iter()
            .map(|p| g.constant(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = self.forward(&mut g, &vars, seq, geom)?;
        Ok(self.loss_domain().decode(g.value(out).item()?))
    }
}

/// Either model, as stored in a weight file.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Physics(PhysicsGradNet),
    Baseline(BaselineCnn),
}

macro_rules! delegate {
    ($self:ident, $m:ident => $e:expr) => {
        match $self {
            AnyModel::Physics($m) => $e,
            AnyModel::Baseline($m) => $e,
        }
    };
}

impl Model for AnyModel {
    fn kind(&self) -> ModelKind {
        delegate!(self, m => m.kind())
    }

    fn n_input_frames(&self) -> usize {
        delegate!(self, m => m.n_input_frames())
    }

    fn loss_domain(&self) -> LossDomain {
        delegate!(self, m => m.loss_domain())
    }

    fn set_loss_domain(&mut self, domain: LossDomain) {
        delegate!(self, m => m.set_loss_domain(domain))
    }

    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        delegate!(self, m => m.layout())
    }

    fn params(&self) -> &[Tensor] {
        delegate!(self, m => m.params())
    }

    fn params_mut(&mut self) -> &mut [Tensor] {
        delegate!(self, m => m.params_mut())
    }

    fn forward(
        &self,
        g: &mut Graph,
        params: &[Var],
        seq: &ImageSequence,
        geom: &CameraGeometry,
    ) -> Result<Var> {
        delegate!(self, m => m.forward(g, params, seq, geom))
    }
}

// -- shared helpers ---------------------------------------------------------

/// He-normal initialization, rounded to `f32` so that saved weights are exact.
pub(crate) fn init_tensor(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng) as f32 as f64).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

pub(crate) fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stacks the frames of `seq` into a `[n, H, W]` tensor.
pub(crate) fn frame_stack(seq: &ImageSequence) -> Tensor {
    let (w, h) = (seq.width(), seq.height());
    let mut data = Vec::with_capacity(seq.len() * w * h);
    for f in seq.frames() {
        data.extend(f.pixels.iter().map(|&v| f64::from(v)));
    }
    Tensor::new(vec![seq.len(), h, w], data).expect("frame sizes are uniform")
}

pub(crate) fn check_frame_count(expected: usize, seq: &ImageSequence) -> Result<()> {
    if seq.len() != expected {
        return Err(Error::Shape(format!(
            "model expects {expected} input frames, got {}",
            seq.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_domain_round_trip() {
        for d in [LossDomain::Log10, LossDomain::Linear] {
            let v = 3.2e-14;
            assert!((d.decode(d.encode(v)) - v).abs() / v < 1e-12);
        }
        assert!("log2".parse::<LossDomain>().is_err());
        assert_eq!(
            "baseline".parse::<ModelKind>().unwrap(),
            ModelKind::Baseline
        );
    }
}
