//! The classical image-gradient Cn2 estimator.
//!
//! Pixel displacement variance is recovered as temporal intensity variance
//! over squared spatial gradient, then scaled by the camera geometry.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{geometry_scalar, CameraGeometry};
use crate::imaging::{
    mean_gradient_sq_map, temporal_variance_map, GradientKernel, ImageSequence, Roi, Stencil,
    BORDER_MARGIN,
};

/// Gradient denominators below this (normalized intensity units) are treated
/// as a flat scene.
pub const DEGENERATE_GRADIENT: f64 = 1e-12;

/// How the variance and gradient maps are reduced to one ratio.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// mean(variance) / mean(gradient^2)
    #[default]
    RatioOfMeans,
    /// mean(variance / gradient^2), skipping pixels with a degenerate gradient
    MeanOfRatios,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cn2Estimate {
    /// m^-2/3
    pub value: f64,
    /// Timestamp of the middle frame, microseconds.
    pub timestamp_us: i64,
    pub n_frames: usize,
    pub kernel: GradientKernel,
    pub roi: Roi,
}

/// Estimator configuration shared by one-off and series estimation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimator {
    pub kernel: GradientKernel,
    pub roi: Roi,
    pub geometry: CameraGeometry,
    pub reduction: Reduction,
    pub margin: usize,
}

impl GradientEstimator {
    pub fn new(kernel: GradientKernel, roi: Roi, geometry: CameraGeometry) -> Self {
        Self {
            kernel,
            roi,
            geometry,
            reduction: Reduction::RatioOfMeans,
            margin: BORDER_MARGIN,
        }
    }

    pub fn with_reduction(mut self, reduction: Reduction) -> Self {
        self.reduction = reduction;
        self
    }

    pub fn estimate(&self, seq: &ImageSequence) -> Result<Cn2Estimate> {
        self.estimate_with_stencil(seq, &self.kernel.stencil())
    }

    /// Same as [`estimate`](Self::estimate) with an explicit stencil; the
    /// recorded kernel is still `self.kernel`.
    pub fn estimate_with_stencil(
        &self,
        seq: &ImageSequence,
        stencil: &Stencil,
    ) -> Result<Cn2Estimate> {
        self.geometry.validate()?;
        self.roi.check_estimable()?;
        let displacement_var =
            displacement_variance(seq, self.roi, stencil, self.reduction, self.margin)?;
        Ok(Cn2Estimate {
            value: geometry_scalar(&self.geometry) * displacement_var,
            timestamp_us: seq.middle_timestamp(),
            n_frames: seq.len(),
            kernel: self.kernel,
            roi: self.roi,
        })
    }

    /// One result per group, in group order; failed groups stay as `Err`.
    pub fn estimate_series(&self, groups: &[ImageSequence]) -> Vec<Result<Cn2Estimate>> {
        groups.par_iter().map(|g| self.estimate(g)).collect()
    }
}

/// Pixel displacement variance (px^2) seen inside `roi`.
pub fn displacement_variance(
    seq: &ImageSequence,
    roi: Roi,
    stencil: &Stencil,
    reduction: Reduction,
    margin: usize,
) -> Result<f64> {
    if seq.len() < 2 {
        return Err(Error::InsufficientFrames {
            needed: 2,
            got: seq.len(),
        });
    }
    let cropped = seq.crop(roi)?;
    let var = temporal_variance_map(&cropped)?;
    let grad = mean_gradient_sq_map(&cropped, stencil)?;
    match reduction {
        Reduction::RatioOfMeans => {
            let num = var.interior_mean(margin);
            let den = grad.interior_mean(margin);
            if den < DEGENERATE_GRADIENT {
                return Err(Error::DegenerateScene(format!(
                    "mean squared gradient {den:e} below {DEGENERATE_GRADIENT:e}"
                )));
            }
            Ok(num / den)
        }
        Reduction::MeanOfRatios => {
            let (w, h) = (var.width, var.height);
            let m = if w > 2 * margin && h > 2 * margin {
                margin
            } else {
                0
            };
            let mut acc = 0.0;
            let mut n = 0usize;
            for y in m..h - m {
                for x in m..w - m {
                    let g = grad.get(x, y);
                    if g >= DEGENERATE_GRADIENT {
                        acc += var.get(x, y) / g;
                        n += 1;
                    }
                }
            }
            if n == 0 {
                return Err(Error::DegenerateScene(
                    "no pixel with a usable gradient".into(),
                ));
            }
            Ok(acc / n as f64)
        }
    }
}

/// Free-function form of [`GradientEstimator::estimate`].
pub fn estimate_cn2(
    seq: &ImageSequence,
    roi: Roi,
    kernel: GradientKernel,
    geom: &CameraGeometry,
) -> Result<Cn2Estimate> {
    GradientEstimator::new(kernel, roi, *geom).estimate(seq)
}

pub fn estimate_series(
    groups: &[ImageSequence],
    roi: Roi,
    kernel: GradientKernel,
    geom: &CameraGeometry,
) -> Vec<Result<Cn2Estimate>> {
    GradientEstimator::new(kernel, roi, *geom).estimate_series(groups)
}

/// Median of the finite values; the mean of the middle pair for even counts.
/// `None` when nothing is left.
pub fn median(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Reduces per-group values to per-minute medians. Input pairs are
/// `(minute_timestamp_us, value)`; a `None` value is a gap in that group.
/// Output is sorted by minute; a minute whose groups all failed maps to `None`.
pub fn minute_medians(per_group: &[(i64, Option<f64>)]) -> Vec<(i64, Option<f64>)> {
    let mut minutes: std::collections::BTreeMap<i64, Vec<f64>> = Default::default();
    for &(minute, value) in per_group {
        let entry = minutes.entry(minute).or_default();
        if let Some(v) = value {
            entry.push(v);
        }
    }
    minutes
        .into_iter()
        .map(|(m, vals)| (m, median(vals)))
        .collect()
}
