use serde::{Deserialize, Serialize};

use super::{
    check_frame_count, frame_stack, init_tensor, seeded_rng, LossDomain, Model, ModelKind,
};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::CameraGeometry;
use crate::imaging::{ImageSequence, Roi};

/// Frames per input stack.
pub const BASELINE_FRAMES: usize = 3;
/// Required input width and height.
pub const BASELINE_SIZE: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub stem_width: usize,
    pub widths: Vec<usize>,
    /// The stem runs after this many 2x2 average poolings of the input.
    pub input_pooling: usize,
    /// Initial head bias, in the loss domain.
    pub head_bias: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            stem_width: 8,
            widths: vec![8, 16, 24, 30],
            input_pooling: 1,
            head_bias: -13.5,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stem_width == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(
                "baseline widths must be non-empty and positive".into(),
            ));
        }
        let downsample = self.input_pooling + self.widths.len();
        if BASELINE_SIZE >> downsample == 0 {
            return Err(Error::Config(format!(
                "{downsample} poolings leave nothing of a {BASELINE_SIZE} px input"
            )));
        }
        Ok(())
    }
}

fn se_hidden(width: usize) -> usize {
    (width / 4).max(2)
}

/// Names and shapes of one fused block's parameters.
fn block_layout(i: usize, cin: usize, w: usize) -> Vec<(String, Vec<usize>)> {
    let r = se_hidden(w);
    vec![
        (format!("block{i}.conv.weight"), vec![w, cin, 3, 3]),
        (format!("block{i}.conv.bias"), vec![w]),
        (format!("block{i}.se_reduce.weight"), vec![r, w]),
        (format!("block{i}.se_reduce.bias"), vec![r]),
        (format!("block{i}.se_expand.weight"), vec![w, r]),
        (format!("block{i}.se_expand.bias"), vec![w]),
        (format!("block{i}.project.weight"), vec![w, w, 1, 1]),
        (format!("block{i}.project.bias"), vec![w]),
    ]
}

pub(crate) fn baseline_layout(config: &BaselineConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = vec![
        (
            "stem.weight".to_string(),
            vec![config.stem_width, BASELINE_FRAMES, 3, 3],
        ),
        ("stem.bias".to_string(), vec![config.stem_width]),
    ];
    let mut cin = config.stem_width;
    for (i, &w) in config.widths.iter().enumerate() {
        out.extend(block_layout(i, cin, w));
        cin = w;
    }
    out.push(("head.weight".to_string(), vec![1, cin]));
    out.push(("head.bias".to_string(), vec![1]));
    out
}

/// Small convolutional regressor with no physics built in.
///
/// Stem 3x3 conv, then per stage: 2x2 average pool and a fused block
/// (3x3 conv, squeeze-and-excitation gate, 1x1 projection, residual add when
/// the width is unchanged). Global average pooling feeds a linear head whose
/// scalar output is read in the model's loss domain.
#[derive(Debug, Clone)]
pub struct BaselineCnn {
    config: BaselineConfig,
    loss_domain: LossDomain,
    params: Vec<Tensor>,
}

impl BaselineCnn {
    pub fn new(config: BaselineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let params = baseline_layout(&config)
            .into_iter()
            .map(|(name, shape)| {
                if name == "head.bias" {
                    Tensor::full(&shape, config.head_bias as f32 as f64)
                } else if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
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

    pub(crate) fn from_parts(
        config: BaselineConfig,
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

    pub fn config(&self) -> &BaselineConfig {
        &self.config
    }

    pub fn n_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Channel attention: `x * sigmoid(W2 relu(W1 gap(x) + b1) + b2)`.
    pub(crate) fn se_gate(g: &mut Graph, x: Var, p: &[Var]) -> Result<Var> {
        let c = g.value(x).shape()[0];
        let s = g.global_avg_pool(x)?;
        let s = g.linear(s, p[0], Some(p[1]))?;
        let s = g.relu(s)?;
        let s = g.linear(s, p[2], Some(p[3]))?;
        let s = g.sigmoid(s)?;
        let s = g.reshape(s, vec![c, 1, 1])?;
        g.mul(x, s)
    }

    /// One fused block; `p` holds the eight parameters of [`block_layout`].
    pub(crate) fn block(g: &mut Graph, x: Var, p: &[Var]) -> Result<Var> {
        let cin = g.value(x).shape()[0];
        let h = g.conv2d(x, p[0], Some(p[1]))?;
        let h = g.relu(h)?;
        let h = Self::se_gate(g, h, &p[2..6])?;
        let h = g.conv2d(h, p[6], Some(p[7]))?;
        if g.value(h).shape()[0] == cin {
            g.add(x, h)
        } else {
            Ok(h)
        }
    }
}

impl Model for BaselineCnn {
    fn kind(&self) -> ModelKind {
        ModelKind::Baseline
    }

    fn n_input_frames(&self) -> usize {
        BASELINE_FRAMES
    }

    fn loss_domain(&self) -> LossDomain {
        self.loss_domain
    }

    fn set_loss_domain(&mut self, domain: LossDomain) {
        self.loss_domain = domain;
    }

    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        baseline_layout(&self.config)
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
        _geom: &CameraGeometry,
    ) -> Result<Var> {
        check_frame_count(BASELINE_FRAMES, seq)?;
        if seq.width() < BASELINE_SIZE || seq.height() < BASELINE_SIZE {
            return Err(Error::Shape(format!(
                "baseline needs frames of at least {BASELINE_SIZE}x{BASELINE_SIZE}, got {}x{}",
                seq.width(),
                seq.height()
            )));
        }
        let cropped;
        let seq = if seq.width() > BASELINE_SIZE || seq.height() > BASELINE_SIZE {
            cropped = seq.crop(Roi::centered(seq.width(), seq.height(), BASELINE_SIZE)?)?;
            &cropped
        } else {
            seq
        };
        let mut h = g.constant(frame_stack(seq))?;
        for _ in 0..self.config.input_pooling {
            h = g.avg_pool2(h)?;
        }
        h = g.conv2d(h, params[0], Some(params[1]))?;
        h = g.relu(h)?;
        for i in 0..self.config.widths.len() {
            h = g.avg_pool2(h)?;
            h = Self::block(g, h, &params[2 + 8 * i..10 + 8 * i])?;
        }
        let pooled = g.global_avg_pool(h)?;
        let n = params.len();
        let out = g.linear(pooled, params[n - 2], Some(params[n - 1]))?;
        g.reshape(out, vec![])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::ImageFrame;

    fn stack(seed: u32) -> ImageSequence {
        let frames = (0..3)
            .map(|i| {
                ImageFrame::from_fn(BASELINE_SIZE, BASELINE_SIZE, i, |x, y| {
                    let v = (x as u32 * 31 + y as u32 * 17 + seed * 7 + i as u32) % 97;
                    v as f64 / 97.0
                })
            })
            .collect();
        ImageSequence::new(frames, "b").unwrap()
    }

    #[test]
    fn deterministic_prediction() {
        let geom = CameraGeometry::field_default();
        let a = BaselineCnn::new(BaselineConfig::default(), 5).unwrap();
        let b = BaselineCnn::new(BaselineConfig::default(), 5).unwrap();
        let s = stack(1);
        assert_eq!(
            a.predict(&s, &geom).unwrap().to_bits(),
            b.predict(&s, &geom).unwrap().to_bits()
        );
    }

    #[test]
    fn wrong_input_shape() {
        let net = BaselineCnn::new(BaselineConfig::default(), 0).unwrap();
        let frames = (0..3)
            .map(|i| ImageFrame::from_fn(64, 64, i, |_, _| 0.5))
            .collect();
        let seq = ImageSequence::new(frames, "small").unwrap();
        assert!(matches!(
            net.predict(&seq, &CameraGeometry::field_default()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_gate_halves_features() {
        let mut g = Graph::new();
        let x = g
            .constant(Tensor::new(vec![2, 2, 2], (1..=8).map(f64::from).collect()).unwrap())
            .unwrap();
        let p: Vec<Var> = [vec![2, 2], vec![2], vec![2, 2], vec![2]]
            .into_iter()
            .map(|s| g.param(Tensor::zeros(&s)).unwrap())
            .collect();
        let y = BaselineCnn::se_gate(&mut g, x, &p).unwrap();
        let want: Vec<f64> = (1..=8).map(|v| 0.5 * v as f64).collect();
        assert_eq!(g.value(y).data(), want.as_slice());
    }

    #[test]
    fn zeroed_block_is_identity() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..4 * 6 * 6).map(|v| (v % 13) as f64 / 13.0).collect();
        let x = g
            .constant(Tensor::new(vec![4, 6, 6], data.clone()).unwrap())
            .unwrap();
        let p: Vec<Var> = block_layout(0, 4, 4)
            .into_iter()
            .map(|(_, s)| g.param(Tensor::zeros(&s)).unwrap())
            .collect();
        let y = BaselineCnn::block(&mut g, x, &p).unwrap();
        assert_eq!(g.value(y).data(), data.as_slice());
    }

    #[test]
    fn parameter_count() {
        let net = BaselineCnn::new(BaselineConfig::default(), 0).unwrap();
        let n = net.n_parameters();
        assert!((10_000..30_000).contains(&n), "{n}");
    }
}
