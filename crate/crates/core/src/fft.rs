//! Thin 2D FFT helpers over `rustfft`.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

pub(crate) type C64 = Complex<f64>;

/// In-place 2D FFT of a row-major `width` x `height` buffer. The inverse is
/// unnormalized, as in `rustfft`.
pub(crate) fn fft2d(data: &mut [C64], width: usize, height: usize, inverse: bool) {
    debug_assert_eq!(data.len(), width * height);
    let mut planner = FftPlanner::<f64>::new();
    let (row, col) = if inverse {
        (
            planner.plan_fft_inverse(width),
            planner.plan_fft_inverse(height),
        )
    } else {
        (
            planner.plan_fft_forward(width),
            planner.plan_fft_forward(height),
        )
    };
    row.process(data);
    let mut t = transpose(data, width, height);
    col.process(&mut t);
    let back = transpose(&t, height, width);
    data.copy_from_slice(&back);
}

fn transpose<T: Copy + Default>(data: &[T], width: usize, height: usize) -> Vec<T> {
    let mut out = vec![T::default(); data.len()];
    for y in 0..height {
        for x in 0..width {
            out[x * height + y] = data[y * width + x];
        }
    }
    out
}

/// Normalized periodic Gaussian of length `n`.
fn periodic_gaussian(n: usize, sigma: f64) -> Vec<f64> {
    let mut g: Vec<f64> = (0..n)
        .map(|k| {
            let d = k.min(n - k) as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Circular Gaussian smoothing with standard deviation `sigma` pixels.
///
/// Returns the smoothed field and the variance gain `sum(k^2)` of the
/// separable kernel, i.e. the marginal variance a unit white-noise input has
/// after smoothing.
pub(crate) fn gaussian_smooth_periodic(
    field: &[f64],
    width: usize,
    height: usize,
    sigma: f64,
) -> (Vec<f64>, f64) {
    let gx = periodic_gaussian(width, sigma);
    let gy = periodic_gaussian(height, sigma);
    let gain = gx.iter().map(|v| v * v).sum::<f64>() * gy.iter().map(|v| v * v).sum::<f64>();

    let mut planner = FftPlanner::<f64>::new();
    let spectrum = |g: &[f64], planner: &mut FftPlanner<f64>| {
        let mut k: Vec<C64> = g.iter().map(|&v| C64::new(v, 0.0)).collect();
        planner.plan_fft_forward(g.len()).process(&mut k);
        k
    };
    let kx = spectrum(&gx, &mut planner);
    let ky = spectrum(&gy, &mut planner);

    let mut buf: Vec<C64> = field.iter().map(|&v| C64::new(v, 0.0)).collect();
    fft2d(&mut buf, width, height, false);
    for y in 0..height {
        for x in 0..width {
            buf[y * width + x] *= kx[x] * ky[y];
        }
    }
    fft2d(&mut buf, width, height, true);
    let norm = (width * height) as f64;
    (buf.iter().map(|c| c.re / norm).collect(), gain)
}
