//! Tilt-statistics turbulence simulator.
//!
//! Each frame is the clean scene warped by a pair of spatially smooth
//! Gaussian displacement fields whose per-pixel standard deviation is the
//! angle-of-arrival tilt implied by the commanded Cn2, optionally plus a
//! global camera-shake translation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::gaussian_smooth_periodic;
use crate::geometry::CameraGeometry;
use crate::imaging::{ImageFrame, ImageSequence, Plane};

/// Frame spacing of the simulated camera (120 fps).
pub const FRAME_INTERVAL_US: i64 = 1_000_000 / 120;

/// Aperture multipliers swept by [`scenario_aperture_sweep`] by default.
pub const DEFAULT_APERTURE_MULTIPLIERS: [f64; 7] = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 51.6];

pub const CN2_MIN: f64 = 1e-17;
pub const CN2_MAX: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Commanded Cn2, m^-2/3. Zero disables the tilt warp.
    pub cn2_true: f64,
    pub geom: CameraGeometry,
    pub n_frames: usize,
    /// Standard deviation (pixels) of the Gaussian that smooths the warp field.
    pub correlation_length: f64,
    /// Radius of the camera-shake disc, pixels.
    pub motion_px: f64,
    pub seed: u64,
    /// Timestamp of frame 0.
    #[serde(default)]
    pub start_timestamp_us: i64,
}

impl SimConfig {
    pub fn new(cn2_true: f64, geom: CameraGeometry, n_frames: usize, seed: u64) -> Self {
        Self {
            cn2_true,
            geom,
            n_frames,
            correlation_length: 32.0,
            motion_px: 0.0,
            seed,
            start_timestamp_us: 0,
        }
    }

    pub fn with_motion(mut self, motion_px: f64) -> Self {
        self.motion_px = motion_px;
        self
    }

    pub fn with_correlation_length(mut self, correlation_length: f64) -> Self {
        self.correlation_length = correlation_length;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.geom.validate()?;
        if !(self.cn2_true == 0.0 || (CN2_MIN..=CN2_MAX).contains(&self.cn2_true)) {
            return Err(Error::InvalidValue(format!(
                "cn2_true {:e} outside [{CN2_MIN:e}, {CN2_MAX:e}]",
                self.cn2_true
            )));
        }
        if self.n_frames < 2 {
            return Err(Error::InsufficientFrames {
                needed: 2,
                got: self.n_frames,
            });
        }
        if !(self.correlation_length >= 1.0) {
            return Err(Error::InvalidValue(format!(
                "correlation_length {} < 1",
                self.correlation_length
            )));
        }
        if !(self.motion_px >= 0.0 && self.motion_px.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "motion_px {} must be >= 0",
                self.motion_px
            )));
        }
        Ok(())
    }
}

/// Per-axis tilt standard deviation in pixels for a given Cn2:
/// `sqrt(P * cn2 * L * D^(-1/3)) / PFOV`.
pub fn tilt_sigma_px(cn2: f64, geom: &CameraGeometry) -> f64 {
    (geom.turbulence_p * cn2 * geom.path_length_l / geom.aperture_d.cbrt()).sqrt() / geom.pfov
}

/// Turbulent displacement fields for one frame, in pixels.
pub struct TiltField {
    pub dx: Plane,
    pub dy: Plane,
    /// Global camera-shake translation applied on top of the field.
    pub shake: (f64, f64),
}

fn frame_rng(seed: u64, frame: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame as u64);
    rng
}

/// Draws the displacement fields of frame `index` for a `width` x `height`
/// scene. Deterministic in `(cfg.seed, index)`.
pub fn tilt_field(cfg: &SimConfig, index: usize, width: usize, height: usize) -> TiltField {
    let mut rng = frame_rng(cfg.seed, index);
    let sigma = tilt_sigma_px(cfg.cn2_true, &cfg.geom);
    let draw = |rng: &mut ChaCha8Rng| -> Plane {
        if sigma == 0.0 {
            return Plane::zeros(width, height);
        }
        let noise: Vec<f64> = (0..width * height)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let (smooth, gain) =
            gaussian_smooth_periodic(&noise, width, height, cfg.correlation_length);
        let scale = sigma / gain.sqrt();
        Plane {
            width,
            height,
            data: smooth.into_iter().map(|v| v * scale).collect(),
        }
    };
    let dx = draw(&mut rng);
    let dy = draw(&mut rng);
    let shake = if cfg.motion_px > 0.0 {
        let r = cfg.motion_px * rng.random::<f64>().sqrt();
        let theta = std::f64::consts::TAU * rng.random::<f64>();
        (r * theta.cos(), r * theta.sin())
    } else {
        (0.0, 0.0)
    };
    TiltField { dx, dy, shake }
}

fn warp(clean: &ImageFrame, field: &TiltField, timestamp_us: i64) -> ImageFrame {
    let (sx, sy) = field.shake;
    let mut frame = ImageFrame::from_fn(clean.width, clean.height, timestamp_us, |x, y| {
        let i = y * clean.width + x;
        clean.sample_bilinear(
            x as f64 + field.dx.data[i] + sx,
            y as f64 + field.dy.data[i] + sy,
        )
    });
    frame.exposure_s = clean.exposure_s;
    frame
}

/// Warps `clean` into a sequence whose tilt statistics match `cfg`. Returns the
/// sequence together with its ground-truth Cn2.
pub fn simulate_sequence(clean: &ImageFrame, cfg: &SimConfig) -> Result<(ImageSequence, f64)> {
    cfg.validate()?;
    let min_side = 2.0 * cfg.correlation_length;
    if (clean.width as f64) <= min_side || (clean.height as f64) <= min_side {
        return Err(Error::Dimension(format!(
            "clean frame {}x{} must exceed 2 x correlation length ({})",
            clean.width, clean.height, cfg.correlation_length
        )));
    }
    let frames: Vec<ImageFrame> = (0..cfg.n_frames)
        .into_par_iter()
        .map(|i| {
            let field = tilt_field(cfg, i, clean.width, clean.height);
            warp(
                clean,
                &field,
                cfg.start_timestamp_us + i as i64 * FRAME_INTERVAL_US,
            )
        })
        .collect();
    let seq = ImageSequence::new(
        frames,
        format!("sim-cn2={:e}-seed={}", cfg.cn2_true, cfg.seed),
    )?;
    Ok((seq, cfg.cn2_true))
}

// ---------------------------------------------------------------------------
// Clean scenes
// ---------------------------------------------------------------------------

/// Procedural clean scenes used to drive the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scene {
    /// Gaussian-smoothed white noise; `feature_scale` is the smoothing
    /// standard deviation in pixels.
    SmoothNoise { feature_scale: f64, contrast: f64 },
    /// Black/white checkerboard target blurred by `blur` pixels.
    TargetBoard {
        square: usize,
        blur: f64,
        contrast: f64,
    },
    /// Horizontal ramp `x * slope`.
    Ramp { slope: f64 },
}

impl Scene {
    pub fn render(&self, width: usize, height: usize, seed: u64) -> ImageFrame {
        match *self {
            Scene::SmoothNoise {
                feature_scale,
                contrast,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let noise: Vec<f64> = (0..width * height)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let (smooth, _) = gaussian_smooth_periodic(&noise, width, height, feature_scale);
                normalize_into(&smooth, width, height, contrast)
            }
            Scene::TargetBoard {
                square,
                blur,
                contrast,
            } => {
                let sq = square.max(1);
                let board: Vec<f64> = (0..width * height)
                    .map(|i| {
                        let (x, y) = (i % width, i / width);
                        if ((x / sq) + (y / sq)) % 2 == 0 {
                            1.0
                        } else {
                            -1.0
                        }
                    })
                    .collect();
                let smooth = if blur > 0.0 {
                    gaussian_smooth_periodic(&board, width, height, blur).0
                } else {
                    board
                };
                normalize_into(&smooth, width, height, contrast)
            }
            Scene::Ramp { slope } => ImageFrame::from_fn(width, height, 0, |x, _| x as f64 * slope),
        }
    }
}

fn normalize_into(values: &[f64], width: usize, height: usize, contrast: f64) -> ImageFrame {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let c = contrast.clamp(0.0, 1.0);
    ImageFrame::from_fn(width, height, 0, |x, y| {
        let t = (values[y * width + x] - lo) / span;
        0.5 + c * (t - 0.5)
    })
}

// ---------------------------------------------------------------------------
// Scenarios
// ---------------------------------------------------------------------------

/// One labelled sequence of a scenario; frames are produced on demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEntry {
    pub label: String,
    pub config: SimConfig,
    pub aperture_multiplier: f64,
}

impl ScenarioEntry {
    pub fn ground_truth(&self) -> f64 {
        self.config.cn2_true
    }

    pub fn simulate(&self, clean: &ImageFrame) -> Result<ImageSequence> {
        simulate_sequence(clean, &self.config).map(|(s, _)| s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioManifest {
    pub name: String,
    pub entries: Vec<ScenarioEntry>,
}

/// Sequence length, warp smoothness and base seed shared by scenario entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioBase {
    pub n_frames: usize,
    pub correlation_length: f64,
    pub seed: u64,
}

impl Default for ScenarioBase {
    fn default() -> Self {
        Self {
            n_frames: 100,
            correlation_length: 32.0,
            seed: 0,
        }
    }
}

fn entry_seed(base: u64, index: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64 + 1)
}

/// Every pairing of `cn2_list` with `motion_levels`.
pub fn scenario_motion_sweep(
    clean: &ImageFrame,
    geom: &CameraGeometry,
    cn2_list: &[f64],
    motion_levels: &[f64],
    base: ScenarioBase,
) -> Result<ScenarioManifest> {
    if cn2_list.is_empty() || motion_levels.is_empty() {
        return Err(Error::EmptyInput(
            "motion sweep needs Cn2 values and motion levels".into(),
        ));
    }
    let mut entries = Vec::with_capacity(cn2_list.len() * motion_levels.len());
    for &motion in motion_levels {
        for &cn2 in cn2_list {
            let index = entries.len();
            let config = SimConfig {
                cn2_true: cn2,
                geom: *geom,
                n_frames: base.n_frames,
                correlation_length: base.correlation_length,
                motion_px: motion,
                seed: entry_seed(base.seed, index),
                start_timestamp_us: 0,
            };
            config.validate()?;
            entries.push(ScenarioEntry {
                label: format!("cn2={cn2:e}/motion={motion}px"),
                config,
                aperture_multiplier: 1.0,
            });
        }
    }
    check_scene_size(clean, base.correlation_length)?;
    Ok(ScenarioManifest {
        name: "motion_sweep".into(),
        entries,
    })
}

/// Every pairing of aperture multiplier with `cn2_list`. The multiplier scales
/// D; ground truth is the commanded Cn2 regardless of aperture.
pub fn scenario_aperture_sweep(
    clean: &ImageFrame,
    base_geom: &CameraGeometry,
    diameter_multipliers: &[f64],
    cn2_list: &[f64],
    base: ScenarioBase,
) -> Result<ScenarioManifest> {
    if cn2_list.is_empty() || diameter_multipliers.is_empty() {
        return Err(Error::EmptyInput(
            "aperture sweep needs Cn2 values and multipliers".into(),
        ));
    }
    if let Some(m) = diameter_multipliers.iter().find(|m| !(**m >= 1.0)) {
        return Err(Error::InvalidValue(format!("aperture multiplier {m} < 1")));
    }
    let mut entries = Vec::new();
    for &mult in diameter_multipliers {
        for (j, &cn2) in cn2_list.iter().enumerate() {
            // Seeds depend only on the Cn2 slot so multiplier 1 reproduces the
            // base scenario exactly.
            let config = SimConfig {
                cn2_true: cn2,
                geom: base_geom.with_aperture(base_geom.aperture_d * mult),
                n_frames: base.n_frames,
                correlation_length: base.correlation_length,
                motion_px: 0.0,
                seed: entry_seed(base.seed, j),
                start_timestamp_us: 0,
            };
            config.validate()?;
            entries.push(ScenarioEntry {
                label: format!("cn2={cn2:e}/aperture=x{mult}"),
                config,
                aperture_multiplier: mult,
            });
        }
    }
    check_scene_size(clean, base.correlation_length)?;
    Ok(ScenarioManifest {
        name: "aperture_sweep".into(),
        entries,
    })
}

fn check_scene_size(clean: &ImageFrame, correlation_length: f64) -> Result<()> {
    let min_side = 2.0 * correlation_length;
    if (clean.width as f64) <= min_side || (clean.height as f64) <= min_side {
        return Err(Error::Dimension(format!(
            "clean frame {}x{} must exceed 2 x correlation length ({correlation_length})",
            clean.width, clean.height
        )));
    }
    Ok(())
}
