//! Frame and sequence types plus the two per-pixel statistics every
//! estimator is built from: temporal intensity variance and squared spatial
//! gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixels excluded on each side of an ROI before any ROI-level mean.
pub const BORDER_MARGIN: usize = 2;

// ---------------------------------------------------------------------------
// Plane
// ---------------------------------------------------------------------------

/// A dense 2D array of `f64`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Mean over the pixels at least `margin` away from every edge. Falls back
    /// to the full mean when the margin would leave nothing.
    pub fn interior_mean(&self, margin: usize) -> f64 {
        if self.width <= 2 * margin || self.height <= 2 * margin {
            return self.mean();
        }
        let mut acc = 0.0;
        for y in margin..self.height - margin {
            let row = &self.data[y * self.width..(y + 1) * self.width];
            acc += row[margin..self.width - margin].iter().sum::<f64>();
        }
        acc / ((self.width - 2 * margin) * (self.height - 2 * margin)) as f64
    }
}

// ---------------------------------------------------------------------------
// Frames and sequences
// ---------------------------------------------------------------------------

/// One grayscale frame with luminance in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFrame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
    /// Microseconds since the Unix epoch.
    pub timestamp_us: i64,
    /// Exposure time in seconds, when known.
    pub exposure_s: Option<f64>,
}

impl ImageFrame {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>, timestamp_us: i64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!("frame is {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::Dimension(format!(
                "expected {} pixels for {width}x{height}, got {}",
                width * height,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels
            .iter()
            .find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0)
        {
            return Err(Error::InvalidValue(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
            timestamp_us,
            exposure_s: None,
        })
    }

    /// Builds a frame from a function, clamping into `[0, 1]`.
    pub fn from_fn(
        width: usize,
        height: usize,
        timestamp_us: i64,
        f: impl Fn(usize, usize) -> f64,
    ) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y).clamp(0.0, 1.0) as f32);
            }
        }
        Self {
            width,
            height,
            pixels,
            timestamp_us,
            exposure_s: None,
        }
    }

    pub fn with_exposure(mut self, exposure_s: f64) -> Self {
        self.exposure_s = Some(exposure_s);
        self
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x] as f64
    }

    /// Pixel lookup with coordinates clamped to the frame (replicate padding).
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.get(xc, yc)
    }

    /// Bilinear sample at a real-valued position, replicate padding outside.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (xi, yi) = (x0 as isize, y0 as isize);
        let a = self.get_clamped(xi, yi);
        let b = self.get_clamped(xi + 1, yi);
        let c = self.get_clamped(xi, yi + 1);
        let d = self.get_clamped(xi + 1, yi + 1);
        let top = a + (b - a) * fx;
        let bottom = c + (d - c) * fx;
        top + (bottom - top) * fy
    }

    /// Multiplies every pixel by `alpha`, clamping into `[0, 1]`.
    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            pixels: self
                .pixels
                .iter()
                .map(|&p| (p as f64 * alpha).clamp(0.0, 1.0) as f32)
                .collect(),
            ..self.clone()
        }
    }

    pub fn to_plane(&self) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            data: self.pixels.iter().map(|&p| p as f64).collect(),
        }
    }
}

/// A three-channel frame prior to luminance conversion.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbFrame {
    pub width: usize,
    pub height: usize,
    pub channels: [Vec<f32>; 3],
    pub timestamp_us: i64,
}

/// An ordered stack of equally sized frames.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSequence {
    frames: Vec<ImageFrame>,
    pub source_id: String,
}

impl ImageSequence {
    pub fn new(frames: Vec<ImageFrame>, source_id: impl Into<String>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::InsufficientFrames {
                needed: 2,
                got: frames.len(),
            });
        }
        let (w, h) = (frames[0].width, frames[0].height);
        for (i, f) in frames.iter().enumerate() {
            if f.width != w || f.height != h {
                return Err(Error::Dimension(format!(
                    "frame {i} is {}x{}, expected {w}x{h}",
                    f.width, f.height
                )));
            }
        }
        if frames
            .windows(2)
            .any(|pair| pair[1].timestamp_us < pair[0].timestamp_us)
        {
            return Err(Error::Validation(
                "frame timestamps must be non-decreasing".into(),
            ));
        }
        Ok(Self {
            frames,
            source_id: source_id.into(),
        })
    }

    pub fn frames(&self) -> &[ImageFrame] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<ImageFrame> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    /// Timestamp of the temporally middle frame.
    pub fn middle_timestamp(&self) -> i64 {
        self.frames[self.frames.len() / 2].timestamp_us
    }

    pub fn crop(&self, roi: Roi) -> Result<Self> {
        let frames = self
            .frames
            .iter()
            .map(|f| crop(f, roi))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            frames,
            source_id: self.source_id.clone(),
        })
    }

    /// Splits into consecutive groups of `size` frames, dropping the remainder.
    pub fn chunks(&self, size: usize) -> Result<Vec<ImageSequence>> {
        if size < 2 {
            return Err(Error::Config(format!("group size {size} < 2")));
        }
        self.frames
            .chunks_exact(size)
            .map(|c| ImageSequence::new(c.to_vec(), self.source_id.clone()))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// ROI
// ---------------------------------------------------------------------------

/// A square region of interest, top-left anchored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Roi {
    pub x0: usize,
    pub y0: usize,
    pub size: usize,
}

impl Roi {
    /// Smallest ROI the estimators accept.
    pub const MIN_SIZE: usize = 8;
    pub const DEFAULT_SIZE: usize = 256;

    pub fn new(x0: usize, y0: usize, size: usize) -> Self {
        Self { x0, y0, size }
    }

    /// ROI of `size` centred in a `width` x `height` frame.
    pub fn centered(width: usize, height: usize, size: usize) -> Result<Self> {
        if size > width || size > height {
            return Err(Error::Bounds(format!(
                "ROI size {size} exceeds frame {width}x{height}"
            )));
        }
        Ok(Self::new((width - size) / 2, (height - size) / 2, size))
    }

    pub fn check_within(&self, width: usize, height: usize) -> Result<()> {
        if self.size == 0 || self.x0 + self.size > width || self.y0 + self.size > height {
            return Err(Error::Bounds(format!(
                "ROI ({},{},{}) outside {width}x{height} frame",
                self.x0, self.y0, self.size
            )));
        }
        Ok(())
    }

    pub fn check_estimable(&self) -> Result<()> {
        if self.size < Self::MIN_SIZE {
            return Err(Error::Bounds(format!(
                "ROI size {} below minimum {}",
                self.size,
                Self::MIN_SIZE
            )));
        }
        Ok(())
    }
}

impl std::str::FromStr for Roi {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<_> = s.split(',').map(str::trim).collect();
        let parse = |p: &str| {
            p.parse::<usize>()
                .map_err(|_| Error::Config(format!("bad ROI component {p:?} in {s:?}")))
        };
        match parts.as_slice() {
            [x0, y0, size] => Ok(Roi::new(parse(x0)?, parse(y0)?, parse(size)?)),
            _ => Err(Error::Config(format!("ROI must be x0,y0,size; got {s:?}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Gradient kernels
// ---------------------------------------------------------------------------

/// The four derivative implementations compared by the gradient method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientKernel {
    Sobel,
    Prewitt,
    CentralDifference,
    IntermediateDifference,
}

impl GradientKernel {
    pub const ALL: [GradientKernel; 4] = [
        GradientKernel::Sobel,
        GradientKernel::Prewitt,
        GradientKernel::CentralDifference,
        GradientKernel::IntermediateDifference,
    ];

    pub fn stencil(self) -> Stencil {
        match self {
            GradientKernel::Sobel => {
                Stencil::new([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]], 3)
            }
            GradientKernel::Prewitt => {
                Stencil::new([[-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0]], 3)
            }
            GradientKernel::CentralDifference => {
                Stencil::new([[0.0; 3], [-0.5, 0.0, 0.5], [0.0; 3]], 3)
            }
            // [-1, +1] over (x, x+1), embedded in a 3x3 window centred on x.
            GradientKernel::IntermediateDifference => {
                Stencil::new([[0.0; 3], [0.0, -1.0, 1.0], [0.0; 3]], 2)
            }
        }
    }

    /// Interior response to a unit-slope ramp, relative to central difference.
    pub fn ramp_gain(self) -> f64 {
        match self {
            GradientKernel::Sobel => 8.0,
            GradientKernel::Prewitt => 6.0,
            GradientKernel::CentralDifference | GradientKernel::IntermediateDifference => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GradientKernel::Sobel => "sobel",
            GradientKernel::Prewitt => "prewitt",
            GradientKernel::CentralDifference => "central",
            GradientKernel::IntermediateDifference => "intermediate",
        }
    }
}

impl std::fmt::Display for GradientKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for GradientKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sobel" => Ok(GradientKernel::Sobel),
            "prewitt" => Ok(GradientKernel::Prewitt),
            "central" | "central_difference" => Ok(GradientKernel::CentralDifference),
            "intermediate" | "intermediate_difference" => {
                Ok(GradientKernel::IntermediateDifference)
            }
            other => Err(Error::Config(format!("unknown gradient kernel {other:?}"))),
        }
    }
}

/// A 3x3 x-derivative stencil; the y stencil is its transpose.
///
/// `support` is the smallest frame side the stencil needs (2 for the
/// two-tap intermediate difference, 3 otherwise).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub x: [[f64; 3]; 3],
    pub support: usize,
}

impl Stencil {
    pub fn new(x: [[f64; 3]; 3], support: usize) -> Self {
        Self { x, support }
    }

    pub fn scaled(self, factor: f64) -> Self {
        let mut x = self.x;
        x.iter_mut().flatten().for_each(|v| *v *= factor);
        Self { x, ..self }
    }

    /// `y[r][c] = x[c][r]`.
    pub fn y(&self) -> [[f64; 3]; 3] {
        let mut y = [[0.0; 3]; 3];
        for (r, row) in y.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.x[c][r];
            }
        }
        y
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// BT.601 luma, clamped into `[0, 1]`.
pub fn to_grayscale(rgb: &RgbFrame) -> Result<ImageFrame> {
    let n = rgb.width * rgb.height;
    if n == 0 {
        return Err(Error::Dimension("empty RGB image".into()));
    }
    for (i, ch) in rgb.channels.iter().enumerate() {
        if ch.len() != n {
            return Err(Error::Dimension(format!(
                "channel {i} has {} values, expected {n}",
                ch.len()
            )));
        }
    }
    let [r, g, b] = &rgb.channels;
    let pixels = (0..n)
        .map(|i| {
            let y = 0.299 * r[i] as f64 + 0.587 * g[i] as f64 + 0.114 * b[i] as f64;
            y.clamp(0.0, 1.0) as f32
        })
        .collect();
    ImageFrame::new(rgb.width, rgb.height, pixels, rgb.timestamp_us)
}

pub fn crop(frame: &ImageFrame, roi: Roi) -> Result<ImageFrame> {
    roi.check_within(frame.width, frame.height)?;
    let mut pixels = Vec::with_capacity(roi.size * roi.size);
    for y in roi.y0..roi.y0 + roi.size {
        let start = y * frame.width + roi.x0;
        pixels.extend_from_slice(&frame.pixels[start..start + roi.size]);
    }
    Ok(ImageFrame {
        width: roi.size,
        height: roi.size,
        pixels,
        timestamp_us: frame.timestamp_us,
        exposure_s: frame.exposure_s,
    })
}

/// Per-pixel unbiased variance of intensity across the frames.
pub fn temporal_variance_map(seq: &ImageSequence) -> Result<Plane> {
    let frames = seq.frames();
    if frames.len() < 2 {
        return Err(Error::InsufficientFrames {
            needed: 2,
            got: frames.len(),
        });
    }
    let n = frames.len() as f64;
    let (w, h) = (seq.width(), seq.height());
    let mut mean = vec![0.0f64; w * h];
    for f in frames {
        for (m, &p) in mean.iter_mut().zip(&f.pixels) {
            *m += p as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut ss = vec![0.0f64; w * h];
    for f in frames {
        for ((s, &p), &m) in ss.iter_mut().zip(&f.pixels).zip(&mean) {
            let d = p as f64 - m;
            *s += d * d;
        }
    }
    ss.iter_mut().for_each(|s| *s /= n - 1.0);
    Ok(Plane {
        width: w,
        height: h,
        data: ss,
    })
}

pub fn spatial_gradient_sq_map(frame: &ImageFrame, kernel: GradientKernel) -> Result<Plane> {
    spatial_gradient_sq_map_with(frame, &kernel.stencil())
}

/// `Gx^2 + Gy^2` for an arbitrary stencil, replicate-padded at the border.
pub fn spatial_gradient_sq_map_with(frame: &ImageFrame, stencil: &Stencil) -> Result<Plane> {
    if frame.width < stencil.support || frame.height < stencil.support {
        return Err(Error::Dimension(format!(
            "frame {}x{} smaller than kernel support {}",
            frame.width, frame.height, stencil.support
        )));
    }
    let kx = stencil.x;
    let ky = stencil.y();
    let (w, h) = (frame.width, frame.height);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let mut gx = 0.0;
            let mut gy = 0.0;
            for (r, (rowx, rowy)) in kx.iter().zip(&ky).enumerate() {
                for c in 0..3 {
                    if rowx[c] == 0.0 && rowy[c] == 0.0 {
                        continue;
                    }
                    let v =
                        frame.get_clamped(x as isize + c as isize - 1, y as isize + r as isize - 1);
                    gx += rowx[c] * v;
                    gy += rowy[c] * v;
                }
            }
            out.push(gx * gx + gy * gy);
        }
    }
    Ok(Plane {
        width: w,
        height: h,
        data: out,
    })
}

/// Gradient-squared map averaged over every frame of the sequence.
pub fn mean_gradient_sq_map(seq: &ImageSequence, stencil: &Stencil) -> Result<Plane> {
    let mut acc = Plane::zeros(seq.width(), seq.height());
    for f in seq.frames() {
        let g = spatial_gradient_sq_map_with(f, stencil)?;
        for (a, v) in acc.data.iter_mut().zip(&g.data) {
            *a += v;
        }
    }
    let n = seq.len() as f64;
    acc.data.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn seq_of(values: &[f32]) -> ImageSequence {
        let frames = values
            .iter()
            .enumerate()
            .map(|(i, &v)| ImageFrame::new(1, 1, vec![v], i as i64).unwrap())
            .collect();
        ImageSequence::new(frames, "t").unwrap()
    }

    #[test]
    fn grayscale_gray_is_fixed_point() {
        let n = 6;
        let rgb = RgbFrame {
            width: 3,
            height: 2,
            channels: [vec![0.5; n], vec![0.5; n], vec![0.5; n]],
            timestamp_us: 0,
        };
        let g = to_grayscale(&rgb).unwrap();
        for p in g.pixels {
            assert_relative_eq!(p, 0.5, epsilon = 1e-6);
        }
    }

    #[test]
    fn grayscale_pure_red() {
        let rgb = RgbFrame {
            width: 1,
            height: 1,
            channels: [vec![1.0], vec![0.0], vec![0.0]],
            timestamp_us: 0,
        };
        assert_relative_eq!(to_grayscale(&rgb).unwrap().pixels[0], 0.299, epsilon = 1e-6);
    }

    #[test]
    fn grayscale_rejects_empty_and_mismatched() {
        let empty = RgbFrame {
            width: 0,
            height: 0,
            channels: [vec![], vec![], vec![]],
            timestamp_us: 0,
        };
        assert!(matches!(to_grayscale(&empty), Err(Error::Dimension(_))));
        let bad = RgbFrame {
            width: 2,
            height: 1,
            channels: [vec![0.0; 2], vec![0.0; 1], vec![0.0; 2]],
            timestamp_us: 0,
        };
        assert!(matches!(to_grayscale(&bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn crop_identity_and_center_block() {
        let f = ImageFrame::from_fn(4, 4, 9, |x, y| (y * 4 + x) as f64 / 16.0);
        assert_eq!(crop(&f, Roi::new(0, 0, 4)).unwrap(), f);
        let c = crop(&f, Roi::new(1, 1, 2)).unwrap();
        assert_eq!(c.width, 2);
        assert_eq!(c.timestamp_us, 9);
        let expect: Vec<f32> = [5, 6, 9, 10].iter().map(|&v| v as f32 / 16.0).collect();
        assert_eq!(c.pixels, expect);
        assert!(matches!(crop(&f, Roi::new(3, 0, 2)), Err(Error::Bounds(_))));
    }

    #[test]
    fn temporal_variance_examples() {
        let v = temporal_variance_map(&seq_of(&[0.0, 1.0])).unwrap();
        assert_relative_eq!(v.data[0], 0.5);
        let v = temporal_variance_map(&seq_of(&[0.2, 0.4, 0.6])).unwrap();
        assert_relative_eq!(v.data[0], 0.04, epsilon = 1e-7);
        let v = temporal_variance_map(&seq_of(&[0.3, 0.3, 0.3])).unwrap();
        assert_eq!(v.data[0], 0.0);
    }

    #[test]
    fn single_frame_sequence_rejected() {
        let f = ImageFrame::new(1, 1, vec![0.0], 0).unwrap();
        assert!(matches!(
            ImageSequence::new(vec![f], "x"),
            Err(Error::InsufficientFrames { .. })
        ));
    }

    #[test]
    fn gradient_of_flat_and_ramp() {
        let flat = ImageFrame::from_fn(8, 8, 0, |_, _| 0.4);
        for k in GradientKernel::ALL {
            assert!(spatial_gradient_sq_map(&flat, k)
                .unwrap()
                .data
                .iter()
                .all(|&v| v == 0.0));
        }
        let c = 1.0 / 64.0;
        let ramp = ImageFrame::from_fn(16, 16, 0, |x, _| x as f64 * c);
        let cd = spatial_gradient_sq_map(&ramp, GradientKernel::CentralDifference).unwrap();
        let sob = spatial_gradient_sq_map(&ramp, GradientKernel::Sobel).unwrap();
        for y in 1..15 {
            for x in 1..15 {
                assert_relative_eq!(cd.get(x, y), c * c, max_relative = 1e-5);
                assert_relative_eq!(sob.get(x, y), (8.0 * c) * (8.0 * c), max_relative = 1e-5);
            }
        }
    }

    #[test]
    fn gradient_rejects_too_small_frame() {
        let f = ImageFrame::from_fn(2, 2, 0, |_, _| 0.1);
        assert!(matches!(
            spatial_gradient_sq_map(&f, GradientKernel::Sobel),
            Err(Error::Dimension(_))
        ));
        assert!(spatial_gradient_sq_map(&f, GradientKernel::IntermediateDifference).is_ok());
    }

    #[test]
    fn roi_parsing() {
        assert_eq!("1, 2,256".parse::<Roi>().unwrap(), Roi::new(1, 2, 256));
        assert!("1,2".parse::<Roi>().is_err());
    }
}
