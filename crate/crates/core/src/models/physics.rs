use serde::{Deserialize, Serialize};

use super::{
    check_frame_count, frame_stack, init_tensor, seeded_rng, LossDomain, Model, ModelKind,
};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{geometry_scalar, CameraGeometry};
use crate::imaging::{temporal_variance_map, ImageSequence, Roi, BORDER_MARGIN};

const KERNEL: usize = 5;
const FRONT_CHANNELS: usize = 3;
const INIT_BIAS: f64 = 0.1;

/// How the single-channel tail output is turned into a positive denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenominatorMode {
    /// mean(tail^2) + eps
    #[default]
    SquaredMean,
    /// mean(softplus(tail)) + eps
    Softplus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhysicsConfig {
    pub n_input_frames: usize,
    /// Number of single-channel 5x5 layers after the front layer.
    pub tail_depth: usize,
    pub activation: Activation,
    pub denominator: DenominatorMode,
    pub eps: f64,
    /// Border pixels left out of both ROI means.
    pub margin: usize,
    /// Centre crop applied to larger inputs before anything else.
    pub roi_size: Option<usize>,
    /// Subtract the group's mean intensity from the network input.
    pub center_input: bool,
    /// Give every layer a bias. Without biases (and with a centred input)
    /// the denominator scales exactly with the square of image contrast.
    pub use_bias: bool,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self {
            n_input_frames: 10,
            tail_depth: 2,
            activation: Activation::Relu,
            denominator: DenominatorMode::SquaredMean,
            eps: 1e-8,
            margin: BORDER_MARGIN,
            roi_size: None,
            center_input: true,
            use_bias: false,
        }
    }
}

impl PhysicsConfig {
    fn params_per_layer(&self) -> usize {
        if self.use_bias {
            2
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=20).contains(&self.n_input_frames) {
            return Err(Error::Config(format!(
                "n_input_frames must be in [2, 20], got {}",
                self.n_input_frames
            )));
        }
        if self.tail_depth == 0 {
            return Err(Error::Config("tail_depth must be at least 1".into()));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Classical gradient estimator with a learned denominator.
///
/// The numerator (ROI mean of per-pixel temporal variance) is fixed. The
/// frame stack goes through one 5x5 layer with three output channels and
/// `tail_depth` single-channel 5x5 layers; the ROI mean of the squared final
/// output plays the part of the mean squared gradient.
#[derive(Debug, Clone)]
pub struct PhysicsGradNet {
    config: PhysicsConfig,
    loss_domain: LossDomain,
    params: Vec<Tensor>,
}

impl PhysicsGradNet {
    /// Randomly initialized network.
    pub fn new(config: PhysicsConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let params = layout_of(&config)
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with(".bias") {
                    // A small positive bias keeps every ReLU (and the squared
                    // output) away from the flat zero-gradient point.
                    Tensor::full(&shape, INIT_BIAS as f32 as f64)
                } else {
                    let fan_in = shape[1] * KERNEL * KERNEL;
                    init_tensor(&shape, fan_in, &mut rng)
                }
            })
            .collect();
        Ok(Self {
            config,
            loss_domain: LossDomain::Log10,
            params,
        })
    }

    /// Weights under which the network reproduces the classical
    /// central-difference estimator on scenes whose gradient is along x: the
    /// front layer averages the frames into channel 0, intermediate tail
    /// layers pass it through, and the last layer takes the horizontal
    /// central difference.
    pub fn central_difference(config: PhysicsConfig) -> Result<Self> {
        // The ReLU after the front layer would clip a centred mean frame.
        let config = PhysicsConfig {
            center_input: false,
            ..config
        };
        let mut net = Self::new(config, 0)?;
        let n = net.config.n_input_frames;
        let c = KERNEL / 2;
        let tap = |o: usize, i: usize, cin: usize, y: usize, x: usize| {
            ((o * cin + i) * KERNEL + y) * KERNEL + x
        };
        for p in net.params.iter_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let depth = net.config.tail_depth;
        {
            let front = net.params[0].data_mut();
            for i in 0..n {
                front[tap(0, i, n, c, c)] = (1.0 / n as f64) as f32 as f64;
            }
        }
        let stride = net.config.params_per_layer();
        for layer in 0..depth {
            let cin = if layer == 0 { FRONT_CHANNELS } else { 1 };
            let w = net.params[stride * (layer + 1)].data_mut();
            if layer + 1 < depth {
                w[tap(0, 0, cin, c, c)] = 1.0;
            } else {
                w[tap(0, 0, cin, c, c - 1)] = -0.5;
                w[tap(0, 0, cin, c, c + 1)] = 0.5;
            }
        }
        Ok(net)
    }

    pub(crate) fn from_parts(
        config: PhysicsConfig,
        loss_domain: LossDomain,
        params: Vec<Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            loss_domain,
            params,
        })
    }

    pub fn config(&self) -> &PhysicsConfig {
        &self.config
    }

    fn prepare(&self, seq: &ImageSequence) -> Result<ImageSequence> {
        check_frame_count(self.config.n_input_frames, seq)?;
        match self.config.roi_size {
            Some(size) if size < seq.width() || size < seq.height() => {
                seq.crop(Roi::centered(seq.width(), seq.height(), size)?)
            }
            _ => Ok(seq.clone()),
        }
    }

    /// ROI mean of the per-pixel temporal variance (the fixed numerator).
    pub fn numerator(&self, seq: &ImageSequence) -> Result<f64> {
        let seq = self.prepare(seq)?;
        Ok(temporal_variance_map(&seq)?.interior_mean(self.config.margin))
    }

    /// Records the learned denominator and returns its handle.
    fn denominator(&self, g: &mut Graph, p: &[Var], seq: &ImageSequence) -> Result<Var> {
        let mut stack = frame_stack(seq);
        if self.config.center_input {
            let m = stack.data().iter().sum::<f64>() / stack.numel() as f64;
            stack.data_mut().iter_mut().for_each(|v| *v -= m);
        }
        let x = g.constant(stack)?;
        let stride = self.config.params_per_layer();
        let bias = |layer: usize| self.config.use_bias.then(|| p[stride * layer + 1]);
        let mut h = g.conv2d(x, p[0], bias(0))?;
        for layer in 1..=self.config.tail_depth {
            h = self.activate(g, h)?;
            h = g.conv2d(h, p[stride * layer], bias(layer))?;
        }
        let (w, hh) = (seq.width(), seq.height());
        if w > 2 * self.config.margin && hh > 2 * self.config.margin {
            h = g.crop_border(h, self.config.margin)?;
        }
        let per_pixel = match self.config.denominator {
            DenominatorMode::SquaredMean => g.square(h)?,
            DenominatorMode::Softplus => g.softplus(h)?,
        };
        let m = g.mean(per_pixel)?;
        g.add_scalar(m, self.config.eps)
    }

    fn activate(&self, g: &mut Graph, h: Var) -> Result<Var> {
        match self.config.activation {
            Activation::Relu => g.relu(h),
            Activation::Identity => Ok(h),
        }
    }
}

fn layout_of(config: &PhysicsConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = vec![(
        "front.weight".to_string(),
        vec![FRONT_CHANNELS, config.n_input_frames, KERNEL, KERNEL],
    )];
    if config.use_bias {
        out.push(("front.bias".to_string(), vec![FRONT_CHANNELS]));
    }
    for layer in 0..config.tail_depth {
        let cin = if layer == 0 { FRONT_CHANNELS } else { 1 };
        out.push((format!("tail{layer}.weight"), vec![1, cin, KERNEL, KERNEL]));
        if config.use_bias {
            out.push((format!("tail{layer}.bias"), vec![1]));
        }
    }
    out
}

pub(crate) fn physics_layout(config: &PhysicsConfig) -> Vec<(String, Vec<usize>)> {
    layout_of(config)
}

impl Model for PhysicsGradNet {
    fn kind(&self) -> ModelKind {
        ModelKind::Physics
    }

    fn n_input_frames(&self) -> usize {
        self.config.n_input_frames
    }

    fn loss_domain(&self) -> LossDomain {
        self.loss_domain
    }

    fn set_loss_domain(&mut self, domain: LossDomain) {
        self.loss_domain = domain;
    }

    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        layout_of(&self.config)
    }

    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    fn forward(
        &self,
        g: &mut Graph,
        params: &[Var],
        seq: &ImageSequence,
        geom: &CameraGeometry,
    ) -> Result<Var> {
        geom.validate()?;
        let seq = self.prepare(seq)?;
        let num = temporal_variance_map(&seq)?.interior_mean(self.config.margin);
        let scale = geometry_scalar(geom) * num;
        let den = self.denominator(g, params, &seq)?;
        match self.loss_domain {
            LossDomain::Linear => {
                let c = g.constant(Tensor::scalar(scale / super::LINEAR_UNIT))?;
                g.div(c, den)
            }
            LossDomain::Log10 => {
                if scale <= 0.0 {
                    return Err(Error::NumericalGuard(
                        "zero temporal variance has no log10 prediction".into(),
                    ));
                }
                let c = g.constant(Tensor::scalar(scale.log10()))?;
                let l = g.log10(den)?;
                g.sub(c, l)
            }
        }
    }

    fn predict(&self, seq: &ImageSequence, geom: &CameraGeometry) -> Result<f64> {
        // A static sequence is exactly zero whatever the weights; handle it
        // before the log-domain path rejects it.
        if self.numerator(seq)? == 0.0 {
            geom.validate()?;
            return Ok(0.0);
        }
        let mut g = Graph::new();
        let vars = self
            .params
            .iter()
            .map(|p| g.constant(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = self.forward(&mut g, &vars, seq, geom)?;
        Ok(self.loss_domain.decode(g.value(out).item()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::ImageFrame;

    fn shifted_ramp(n: usize, size: usize, slope: f64) -> ImageSequence {
        let frames = (0..n)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                ImageFrame::from_fn(size, size, i as i64, |x, _| 0.2 + slope * (x as f64 + s))
            })
            .collect();
        ImageSequence::new(frames, "ramp").unwrap()
    }

    #[test]
    fn config_bounds() {
        let mut c = PhysicsConfig::default();
        c.n_input_frames = 1;
        assert!(PhysicsGradNet::new(c.clone(), 0).is_err());
        c.n_input_frames = 21;
        assert!(PhysicsGradNet::new(c, 0).is_err());
    }

    #[test]
    fn frame_count_mismatch_is_shape_error() {
        let net = PhysicsGradNet::new(PhysicsConfig::default(), 1).unwrap();
        let seq = shifted_ramp(4, 16, 0.01);
        let err = net
            .predict(&seq, &CameraGeometry::field_default())
            .unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn static_input_predicts_zero() {
        let net = PhysicsGradNet::new(PhysicsConfig::default(), 3).unwrap();
        let frames = (0..10)
            .map(|i| ImageFrame::from_fn(16, 16, i, |x, y| ((x * 7 + y * 3) % 11) as f64 / 11.0))
            .collect();
        let seq = ImageSequence::new(frames, "s").unwrap();
        assert_eq!(
            net.predict(&seq, &CameraGeometry::field_default()).unwrap(),
            0.0
        );
    }

    #[test]
    fn hand_set_weights_match_ramp_gradient() {
        let net = PhysicsGradNet::central_difference(PhysicsConfig::default()).unwrap();
        let seq = shifted_ramp(10, 32, 0.01);
        let geom = CameraGeometry::field_default();
        let got = net.predict(&seq, &geom).unwrap();
        // Displacement variance of alternating +-1 px shifts is n/(n-1).
        let want = geometry_scalar(&geom) * 10.0 / 9.0;
        assert!((got / want - 1.0).abs() < 0.02, "{got:e} vs {want:e}");
    }
}
