//! Two-stage platform-motion correction.
//!
//! The coarse stage locks every frame onto a user-chosen anchor patch with an
//! integer-pixel normalized cross-correlation search. The fine stage removes
//! the remaining sub-pixel jitter with windowed phase correlation against the
//! reference frame and bilinear resampling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{fft2d, C64};
use crate::imaging::{crop, ImageFrame, ImageSequence, Roi};

pub const DEFAULT_MAX_SHIFT: f64 = 32.0;
pub const DEFAULT_NCC_THRESHOLD: f64 = 0.3;

/// Standard deviation (px) of the Gaussian the correlation peak is shaped to
/// before sub-pixel interpolation.
const PEAK_WIDTH_PX: f64 = 1.0;

/// Cross-power magnitude, relative to the strongest bin, below which a bin
/// is faded out.
const SPECTRAL_FLOOR: f64 = 1e-4;

/// Extra fine-alignment passes on the residual shift, and the residual
/// below which they stop.
const REFINE_PASSES: usize = 4;
const REFINE_STOP_PX: f64 = 0.005;

/// A translation correction in pixels. Applying it moves frame content by
/// `(dx, dy)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RigidShift {
    pub dx: f64,
    pub dy: f64,
}

impl RigidShift {
    pub fn new(dx: f64, dy: f64) -> Self {
        Self { dx, dy }
    }

    pub fn magnitude(&self) -> f64 {
        self.dx.hypot(self.dy)
    }
}

/// Middle frame of a sequence of `n` frames.
pub fn default_reference(n: usize) -> usize {
    n / 2
}

/// Moves frame content by `shift`, replicate padding what is vacated.
pub fn translate(frame: &ImageFrame, shift: RigidShift) -> ImageFrame {
    let mut out = ImageFrame::from_fn(frame.width, frame.height, frame.timestamp_us, |x, y| {
        frame.sample_bilinear(x as f64 - shift.dx, y as f64 - shift.dy)
    });
    out.exposure_s = frame.exposure_s;
    out
}

fn check_reference(seq: &ImageSequence, reference_index: usize) -> Result<()> {
    if reference_index >= seq.len() {
        return Err(Error::Bounds(format!(
            "reference index {reference_index} outside sequence of {} frames",
            seq.len()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Coarse stage
// ---------------------------------------------------------------------------

fn zero_mean_patch(frame: &ImageFrame, roi: Roi) -> Option<(Vec<f64>, f64)> {
    let p = crop(frame, roi).ok()?;
    let n = p.pixels.len() as f64;
    let mean = p.pixels.iter().map(|&v| v as f64).sum::<f64>() / n;
    let centered: Vec<f64> = p.pixels.iter().map(|&v| v as f64 - mean).collect();
    let norm = centered.iter().map(|v| v * v).sum::<f64>().sqrt();
    Some((centered, norm))
}

/// Integer shift of `frame`'s content relative to the reference anchor, and
/// its normalized cross-correlation.
fn best_anchor_match(
    frame: &ImageFrame,
    anchor: Roi,
    reference: &[f64],
    reference_norm: f64,
    radius: i64,
) -> (i64, i64, f64) {
    let mut best = (0, 0, f64::NEG_INFINITY);
    for sy in -radius..=radius {
        for sx in -radius..=radius {
            let x0 = anchor.x0 as i64 + sx;
            let y0 = anchor.y0 as i64 + sy;
            if x0 < 0 || y0 < 0 {
                continue;
            }
            let cand = Roi::new(x0 as usize, y0 as usize, anchor.size);
            let Some((patch, norm)) = zero_mean_patch(frame, cand) else {
                continue;
            };
            if norm <= 1e-12 {
                continue;
            }
            let dot: f64 = patch.iter().zip(reference).map(|(a, b)| a * b).sum();
            let ncc = dot / (norm * reference_norm);
            // Ties resolve to the smallest displacement.
            if ncc > best.2 + 1e-12
                || ((ncc - best.2).abs() <= 1e-12
                    && sx * sx + sy * sy < best.0 * best.0 + best.1 * best.1)
            {
                best = (sx, sy, ncc);
            }
        }
    }
    best
}

/// Integer-pixel alignment of every frame onto the reference frame's anchor
/// patch. Returns the aligned sequence and the applied corrections.
pub fn coarse_align_with_shifts(
    seq: &ImageSequence,
    anchor: Roi,
    reference_index: usize,
    max_shift: f64,
    threshold: f64,
) -> Result<(ImageSequence, Vec<RigidShift>)> {
    check_reference(seq, reference_index)?;
    anchor.check_within(seq.width(), seq.height())?;
    let reference = &seq.frames()[reference_index];
    let (ref_patch, ref_norm) = zero_mean_patch(reference, anchor)
        .ok_or_else(|| Error::Bounds("anchor outside reference frame".into()))?;
    if ref_norm <= 1e-9 {
        return Err(Error::AlignmentFailure {
            frame: reference_index,
            peak: 0.0,
            threshold,
        });
    }
    let radius = max_shift.floor().max(0.0) as i64;
    let matches: Vec<(usize, (i64, i64, f64))> = seq
        .frames()
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            (
                i,
                best_anchor_match(f, anchor, &ref_patch, ref_norm, radius),
            )
        })
        .collect();

    let mut frames = Vec::with_capacity(seq.len());
    let mut shifts = Vec::with_capacity(seq.len());
    for (i, (sx, sy, ncc)) in matches {
        if !(ncc >= threshold) {
            return Err(Error::AlignmentFailure {
                frame: i,
                peak: if ncc.is_finite() { ncc } else { 0.0 },
                threshold,
            });
        }
        let correction = RigidShift::new(-(sx as f64), -(sy as f64));
        let f = &seq.frames()[i];
        frames.push(if sx == 0 && sy == 0 {
            f.clone()
        } else {
            translate(f, correction)
        });
        shifts.push(correction);
    }
    Ok((ImageSequence::new(frames, seq.source_id.clone())?, shifts))
}

pub fn coarse_align(
    seq: &ImageSequence,
    anchor: Roi,
    reference_index: usize,
) -> Result<ImageSequence> {
    coarse_align_with_shifts(
        seq,
        anchor,
        reference_index,
        DEFAULT_MAX_SHIFT,
        DEFAULT_NCC_THRESHOLD,
    )
    .map(|(s, _)| s)
}

// ---------------------------------------------------------------------------
// Fine stage
// ---------------------------------------------------------------------------

/// Hann-windowed, mean-removed spectrum of a frame; `None` for a flat frame.
fn windowed_spectrum(frame: &ImageFrame) -> Option<Vec<C64>> {
    let (w, h) = (frame.width, frame.height);
    let n = (w * h) as f64;
    let mean = frame.pixels.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = frame
        .pixels
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    if var < 1e-14 {
        return None;
    }
    let hann = |i: usize, len: usize| {
        if len < 2 {
            1.0
        } else {
            0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / len as f64).cos()
        }
    };
    let wx: Vec<f64> = (0..w).map(|i| hann(i, w)).collect();
    let wy: Vec<f64> = (0..h).map(|i| hann(i, h)).collect();
    let mut buf: Vec<C64> = (0..w * h)
        .map(|i| C64::new((frame.pixels[i] as f64 - mean) * wx[i % w] * wy[i / w], 0.0))
        .collect();
    fft2d(&mut buf, w, h, false);
    Some(buf)
}

/// Signed frequency index for FFT bin `k` of an `n`-point transform.
fn signed_bin(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Sub-pixel vertex of the 3-point parabola through log-correlation values.
fn parabolic_offset(left: f64, center: f64, right: f64) -> f64 {
    let floor = 1e-300;
    let (l, c, r) = (
        left.max(floor).ln(),
        center.max(floor).ln(),
        right.max(floor).ln(),
    );
    let denom = l - 2.0 * c + r;
    if denom.abs() < 1e-15 || !denom.is_finite() {
        return 0.0;
    }
    (0.5 * (l - r) / denom).clamp(-0.5, 0.5)
}

/// Content displacement of `spectrum`'s frame relative to the reference.
fn phase_correlate(
    reference: &[C64],
    spectrum: &[C64],
    width: usize,
    height: usize,
    max_shift: f64,
) -> RigidShift {
    let sigma_f = 1.0 / (std::f64::consts::TAU * PEAK_WIDTH_PX);
    let products: Vec<C64> = spectrum
        .iter()
        .zip(reference)
        .map(|(a, b)| a * b.conj())
        .collect();
    // Bins far below the strongest one carry rounding noise rather than
    // phase; the floor fades them out instead of normalizing them to 1.
    let floor = SPECTRAL_FLOOR * products.iter().map(|p| p.norm()).fold(0.0, f64::max);
    let mut cross: Vec<C64> = products
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let m = p.norm() + floor;
            if m < 1e-20 {
                return C64::new(0.0, 0.0);
            }
            let fx = signed_bin(i % width, width) / width as f64;
            let fy = signed_bin(i / width, height) / height as f64;
            let weight = (-(fx * fx + fy * fy) / (2.0 * sigma_f * sigma_f)).exp();
            p / m * weight
        })
        .collect();
    fft2d(&mut cross, width, height, true);
    let surface: Vec<f64> = cross.iter().map(|c| c.re).collect();

    let radius = max_shift.floor().max(0.0) as i64;
    let wrap = |v: i64, n: usize| v.rem_euclid(n as i64) as usize;
    let at = |dx: i64, dy: i64| surface[wrap(dy, height) * width + wrap(dx, width)];
    let rx = radius.min(width as i64 / 2 - 1).max(0);
    let ry = radius.min(height as i64 / 2 - 1).max(0);
    let mut best = (0i64, 0i64, f64::NEG_INFINITY);
    for dy in -ry..=ry {
        for dx in -rx..=rx {
            let v = at(dx, dy);
            if v > best.2 {
                best = (dx, dy, v);
            }
        }
    }
    let (px, py, peak) = best;
    let ox = parabolic_offset(at(px - 1, py), peak, at(px + 1, py));
    let oy = parabolic_offset(at(px, py - 1), peak, at(px, py + 1));
    RigidShift::new(
        (px as f64 + ox).clamp(-max_shift, max_shift),
        (py as f64 + oy).clamp(-max_shift, max_shift),
    )
}

/// Result of [`fine_align`].
#[derive(Debug, Clone)]
pub struct FineAlignment {
    pub sequence: ImageSequence,
    /// Applied corrections, one per frame.
    pub shifts: Vec<RigidShift>,
    /// Indices of frames that were flat and left uncorrected.
    pub degenerate_frames: Vec<usize>,
}

impl FineAlignment {
    pub fn warning(&self) -> bool {
        !self.degenerate_frames.is_empty()
    }
}

/// Sub-pixel translation alignment onto `reference_index`.
pub fn fine_align(
    seq: &ImageSequence,
    reference_index: usize,
    max_shift: f64,
) -> Result<FineAlignment> {
    check_reference(seq, reference_index)?;
    let (w, h) = (seq.width(), seq.height());
    let reference = windowed_spectrum(&seq.frames()[reference_index]);
    let results: Vec<(ImageFrame, RigidShift, bool)> = seq
        .frames()
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let spectrum = if i == reference_index {
                None
            } else {
                windowed_spectrum(f)
            };
            match (&reference, spectrum) {
                (Some(r), Some(s)) => {
                    let moved = phase_correlate(r, &s, w, h, max_shift);
                    let mut correction = RigidShift::new(-moved.dx, -moved.dy);
                    let mut aligned = translate(f, correction);
                    // The fixed window pulls large shifts toward zero; measure
                    // what is left after each correction and add it on.
                    for _ in 0..REFINE_PASSES {
                        let Some(s) = windowed_spectrum(&aligned) else {
                            break;
                        };
                        let rest = phase_correlate(r, &s, w, h, max_shift);
                        if rest.magnitude() < REFINE_STOP_PX {
                            break;
                        }
                        correction =
                            RigidShift::new(correction.dx - rest.dx, correction.dy - rest.dy);
                        aligned = translate(f, correction);
                    }
                    (aligned, correction, false)
                }
                _ => {
                    let degenerate = i != reference_index || reference.is_none();
                    (f.clone(), RigidShift::default(), degenerate)
                }
            }
        })
        .collect();
    let mut frames = Vec::with_capacity(results.len());
    let mut shifts = Vec::with_capacity(results.len());
    let mut degenerate_frames = Vec::new();
    for (i, (f, s, bad)) in results.into_iter().enumerate() {
        if bad {
            log::warn!("frame {i} is flat; fine alignment skipped");
            degenerate_frames.push(i);
        }
        frames.push(f);
        shifts.push(s);
    }
    Ok(FineAlignment {
        sequence: ImageSequence::new(frames, seq.source_id.clone())?,
        shifts,
        degenerate_frames,
    })
}

/// Root-mean-square shift magnitude in pixels.
pub fn residual_motion(shifts: &[RigidShift]) -> Result<f64> {
    if shifts.is_empty() {
        return Err(Error::EmptyInput("no shifts".into()));
    }
    let ms = shifts
        .iter()
        .map(|s| s.dx * s.dx + s.dy * s.dy)
        .sum::<f64>()
        / shifts.len() as f64;
    Ok(ms.sqrt())
}

// ---------------------------------------------------------------------------
// Combined pipeline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilizeConfig {
    /// Anchor patch for the coarse stage; the coarse stage is skipped without one.
    pub anchor: Option<Roi>,
    /// Defaults to the middle frame.
    pub reference_index: Option<usize>,
    pub max_shift: f64,
    pub coarse: bool,
    pub fine: bool,
    pub ncc_threshold: f64,
}

impl Default for StabilizeConfig {
    fn default() -> Self {
        Self {
            anchor: None,
            reference_index: None,
            max_shift: DEFAULT_MAX_SHIFT,
            coarse: true,
            fine: true,
            ncc_threshold: DEFAULT_NCC_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StabilizeReport {
    pub sequence: ImageSequence,
    pub coarse_shifts: Vec<RigidShift>,
    pub fine_shifts: Vec<RigidShift>,
    pub degenerate_frames: Vec<usize>,
}

pub fn stabilize(seq: &ImageSequence, cfg: &StabilizeConfig) -> Result<StabilizeReport> {
    let reference = cfg
        .reference_index
        .unwrap_or_else(|| default_reference(seq.len()));
    let mut current = seq.clone();
    let mut coarse_shifts = Vec::new();
    if cfg.coarse {
        if let Some(anchor) = cfg.anchor {
            let (s, shifts) = coarse_align_with_shifts(
                &current,
                anchor,
                reference,
                cfg.max_shift,
                cfg.ncc_threshold,
            )?;
            current = s;
            coarse_shifts = shifts;
        }
    }
    let mut fine_shifts = Vec::new();
    let mut degenerate_frames = Vec::new();
    if cfg.fine {
        let fine = fine_align(&current, reference, cfg.max_shift)?;
        current = fine.sequence;
        fine_shifts = fine.shifts;
        degenerate_frames = fine.degenerate_frames;
    }
    Ok(StabilizeReport {
        sequence: current,
        coarse_shifts,
        fine_shifts,
        degenerate_frames,
    })
}
