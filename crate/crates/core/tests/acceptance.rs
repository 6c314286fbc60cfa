//! End-to-end acceptance checks. Each test prints one `[PASS]`/`[FAIL]` line
//! with the measured quantities and the pinned tolerance, then asserts.

use std::sync::OnceLock;
use std::time::Instant;

use cn2_core::autodiff::{Graph, Tensor, Var};
use cn2_core::estimator::GradientEstimator;
use cn2_core::eval::{
    metrics, simulated_dataset, ClassicalEstimator, Cn2Estimator, Dataset, LearnedEstimator,
    MetricDomain, MetricSet, MinuteSample, Prediction, SceneCase,
};
use cn2_core::imaging::{GradientKernel, ImageFrame, ImageSequence, Roi};
use cn2_core::ingest::load_dataset;
use cn2_core::models::{
    BaselineCnn, BaselineConfig, Model, PhysicsConfig, PhysicsGradNet, TrainConfig,
};
use cn2_core::stabilize::{stabilize, StabilizeConfig};
use cn2_core::turbsim::{simulate_sequence, tilt_sigma_px, Scene, SimConfig};
use cn2_core::{geometry_scalar, CameraGeometry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(name: &str, pass: bool, detail: String) {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
}

fn field() -> CameraGeometry {
    CameraGeometry::field_default()
}

fn texture(feature_scale: f64, contrast: f64) -> Scene {
    Scene::SmoothNoise {
        feature_scale,
        contrast,
    }
}

fn central(seq: &ImageSequence, roi: Roi, geom: &CameraGeometry) -> f64 {
    GradientEstimator::new(GradientKernel::CentralDifference, roi, *geom)
        .estimate(seq)
        .unwrap()
        .value
}

// ---------------------------------------------------------------------------
// Simulator round trip
// ---------------------------------------------------------------------------

#[test]
fn simulator_round_trip() {
    const MAX_LOG_ERR: f64 = 0.3;
    const MIN_R2: f64 = 0.95;
    const MAX_SECONDS: f64 = 120.0;

    let start = Instant::now();
    let geom = field();
    let clean = texture(16.0, 0.8).render(512, 512, 101);
    let roi = Roi::centered(512, 512, 256).unwrap();
    let truths = [1e-15, 1e-14, 1e-13, 1e-12];
    let mut preds = Vec::new();
    let mut worst: f64 = 0.0;
    for (i, &cn2) in truths.iter().enumerate() {
        let cfg = SimConfig::new(cn2, geom, 100, 500 + i as u64);
        let (seq, truth) = simulate_sequence(&clean, &cfg).unwrap();
        let est = central(&seq, roi, &geom);
        worst = worst.max((est / truth).log10().abs());
        preds.push(est);
    }
    let r2 = metrics(&preds, &truths, MetricDomain::Linear).unwrap().r2;
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= MAX_LOG_ERR && r2 >= MIN_R2 && secs <= MAX_SECONDS;
    report(
        "simulator round trip",
        pass,
        format!(
            "max |log10 err| {worst:.3} (<= {MAX_LOG_ERR}), linear R2 {r2:.4} (>= {MIN_R2}), {secs:.1}s (<= {MAX_SECONDS}s); estimates {}",
            preds.iter().map(|p| format!("{p:.3e}")).collect::<Vec<_>>().join(" ")
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Analytic ramp
// ---------------------------------------------------------------------------

#[test]
fn analytic_ramp_oracle() {
    const TARGET: f64 = 1.741e-14;
    const TOL: f64 = 0.01;
    let n = 200;
    let frames = (0..n)
        .map(|i| {
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            ImageFrame::from_fn(64, 64, i as i64, |x, _| 0.1 + 0.01 * (x as f64 + s))
        })
        .collect();
    let seq = ImageSequence::new(frames, "ramp").unwrap();
    let got = central(&seq, Roi::new(0, 0, 64), &field());
    let rel = (got / TARGET - 1.0).abs();
    // Independent check: unbiased variance of n alternating +-1 values.
    let oracle = geometry_scalar(&field()) * n as f64 / (n - 1) as f64;
    let pass = rel <= TOL && (got / oracle - 1.0).abs() < 1e-4;
    report(
        "analytic ramp oracle",
        pass,
        format!("estimate {got:.4e} vs {TARGET:e} (rel err {rel:.4}, tol {TOL}); closed form {oracle:.4e}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Aperture sweep
// ---------------------------------------------------------------------------

#[test]
fn aperture_sweep() {
    const SIGMA_TOL: f64 = 0.05;
    const MAX_LOG_ERR: f64 = 0.3;
    let base = field();
    let ratio = tilt_sigma_px(1e-13, &base)
        / tilt_sigma_px(1e-13, &base.with_aperture(8.0 * base.aperture_d));
    let want = 8f64.powf(1.0 / 6.0);
    let sigma_ok = (ratio / want - 1.0).abs() <= SIGMA_TOL;

    let clean = texture(16.0, 0.8).render(256, 256, 7);
    let roi = Roi::centered(256, 256, 192).unwrap();
    let mut worst: f64 = 0.0;
    let mut rows = Vec::new();
    for mult in [1.0, 8.0, 51.6] {
        let geom = base.with_aperture(base.aperture_d * mult);
        for (j, cn2) in [1e-15, 1e-14, 1e-13].into_iter().enumerate() {
            let cfg = SimConfig::new(cn2, geom, 64, 900 + j as u64);
            let (seq, truth) = simulate_sequence(&clean, &cfg).unwrap();
            let err = (central(&seq, roi, &geom) / truth).log10();
            worst = worst.max(err.abs());
            rows.push(format!("x{mult}/{cn2:e}:{err:+.3}"));
        }
    }
    let pass = sigma_ok && worst <= MAX_LOG_ERR;
    report(
        "aperture sweep",
        pass,
        format!(
            "sigma ratio {ratio:.4} vs 8^(1/6)={want:.4} (tol {SIGMA_TOL}); max |log10 err| {worst:.3} (<= {MAX_LOG_ERR}); {}",
            rows.join(" ")
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Autodiff fidelity
// ---------------------------------------------------------------------------

const FD_STEP: f64 = 1e-4;
const FD_TOL: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
const FD_FLOOR: f64 = 1e-3;
const CHECKS_PER_FAMILY: usize = 100;

type Builder = dyn Fn(&mut Graph, &[Var]) -> cn2_core::Result<Var>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, signed: bool) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(lo..hi);
            if signed && rng.random_bool(0.5) {
                -v
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Contracts the output with fixed random weights so every output element
/// contributes to the scalar being differentiated.
fn scalarize(g: &mut Graph, out: Var, weights: &Tensor) -> cn2_core::Result<Var> {
    let w = g.constant(weights.clone())?;
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

fn eval_scalar(inputs: &[Tensor], build: &Builder, weights: &Tensor) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone()).unwrap()).collect();
    let out = build(&mut g, &vars).unwrap();
    let s = scalarize(&mut g, out, weights).unwrap();
    g.value(s).item().unwrap()
}

/// Worst relative discrepancy between the tape gradient and central
/// differences, over every coordinate of every input.
fn fd_worst(inputs: &[Tensor], build: &Builder, rng: &mut ChaCha8Rng) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone()).unwrap()).collect();
    let out = build(&mut g, &vars).unwrap();
    let weights = rand_tensor(rng, g.value(out).shape(), 0.5, 1.5, true);
    let s = scalarize(&mut g, out, &weights).unwrap();
    g.backward(s).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();

    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let mut shifted = inputs.to_vec();
            shifted[k].data_mut()[i] = t.data()[i] + FD_STEP;
            let up = eval_scalar(&shifted, build, &weights);
            shifted[k].data_mut()[i] = t.data()[i] - FD_STEP;
            let down = eval_scalar(&shifted, build, &weights);
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[k][i];
            let scale = a.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max((a - numeric).abs() / scale);
        }
    }
    worst
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// One randomized case per call: the inputs and the expression over them.
fn family_case(family: usize, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Box<Builder>) {
    match family {
        // Elementwise, with broadcasting of a row against a matrix.
        0 => {
            let (m, n) = (dims(rng, 1, 4), dims(rng, 1, 5));
            let a = rand_tensor(rng, &[m, n], 0.3, 2.0, false);
            let b = rand_tensor(rng, &[1, n], 0.5, 2.0, true);
            let which = rng.random_range(0..11usize);
            let build: Box<Builder> = Box::new(move |g, v| match which {
                0 => g.add(v[0], v[1]),
                1 => g.sub(v[0], v[1]),
                2 => g.mul(v[0], v[1]),
                3 => g.div(v[0], v[1]),
                4 => {
                    let d = g.sub(v[0], v[1])?;
                    g.relu(d)
                }
                5 => g.log10(v[0]),
                6 => g.square(v[1]),
                7 => g.softplus(v[1]),
                8 => g.sigmoid(v[1]),
                9 => {
                    let s = g.scale(v[0], -1.7)?;
                    g.mul(s, v[1])
                }
                _ => {
                    let s = g.add_scalar(v[0], 0.4)?;
                    g.div(v[1], s)
                }
            });
            // Keep relu inputs clear of the kink by more than the step.
            if which == 4 {
                let clear = a
                    .data()
                    .iter()
                    .enumerate()
                    .all(|(i, x)| (x - b.data()[i % n]).abs() > 1e-2);
                if !clear {
                    return family_case(family, rng);
                }
            }
            (vec![a, b], build)
        }
        // Reductions.
        1 => {
            let shape = [dims(rng, 2, 4), dims(rng, 2, 4), dims(rng, 2, 4)];
            let x = rand_tensor(rng, &shape, 0.1, 2.0, true);
            let which = rng.random_range(0..5usize);
            let build: Box<Builder> = Box::new(move |g, v| match which {
                0 => g.mean(v[0]),
                1 => g.sum(v[0]),
                w => g.variance(v[0], w - 2),
            });
            (vec![x], build)
        }
        // Convolution.
        2 => {
            let k = [1, 3, 5][rng.random_range(0..3)];
            let (c, o) = (dims(rng, 1, 3), dims(rng, 1, 3));
            let (h, w) = (dims(rng, 2, 6), dims(rng, 2, 6));
            let x = rand_tensor(rng, &[c, h, w], 0.1, 1.0, true);
            let wt = rand_tensor(rng, &[o, c, k, k], 0.1, 1.0, true);
            let b = rand_tensor(rng, &[o], 0.1, 1.0, true);
            let build: Box<Builder> = Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2])));
            (vec![x, wt, b], build)
        }
        // Pooling, linear, crop and reshape.
        3 => {
            let which = rng.random_range(0..4usize);
            let c = dims(rng, 1, 3);
            match which {
                0 => {
                    let shape = [c, dims(rng, 2, 7), dims(rng, 2, 7)];
                    let x = rand_tensor(rng, &shape, 0.1, 1.0, true);
                    (vec![x], Box::new(|g, v| g.avg_pool2(v[0])))
                }
                1 => {
                    let shape = [c, dims(rng, 1, 5), dims(rng, 1, 5)];
                    let x = rand_tensor(rng, &shape, 0.1, 1.0, true);
                    (vec![x], Box::new(|g, v| g.global_avg_pool(v[0])))
                }
                2 => {
                    let (i, o) = (dims(rng, 1, 6), dims(rng, 1, 4));
                    let x = rand_tensor(rng, &[i], 0.1, 1.0, true);
                    let w = rand_tensor(rng, &[o, i], 0.1, 1.0, true);
                    let b = rand_tensor(rng, &[o], 0.1, 1.0, true);
                    (
                        vec![x, w, b],
                        Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]))),
                    )
                }
                _ => {
                    let (h, w) = (dims(rng, 3, 7), dims(rng, 3, 7));
                    let x = rand_tensor(rng, &[c, h, w], 0.1, 1.0, true);
                    (
                        vec![x],
                        Box::new(move |g, v| {
                            let cropped = g.crop_border(v[0], 1)?;
                            g.reshape(cropped, vec![c * (h - 2) * (w - 2)])
                        }),
                    )
                }
            }
        }
        // A two-layer composite: conv, relu, conv, squared mean, log10.
        _ => {
            let (h, w) = (dims(rng, 4, 6), dims(rng, 4, 6));
            let x = rand_tensor(rng, &[2, h, w], 0.1, 1.0, true);
            let w1 = rand_tensor(rng, &[2, 2, 3, 3], 0.05, 0.5, true);
            let w2 = rand_tensor(rng, &[1, 2, 3, 3], 0.05, 0.5, true);
            // Reject draws whose hidden layer sits near the relu kink.
            let mut g = Graph::new();
            let xv = g.constant(x.clone()).unwrap();
            let wv = g.constant(w1.clone()).unwrap();
            let pre = g.conv2d(xv, wv, None).unwrap();
            if g.value(pre).data().iter().any(|p| p.abs() < 1e-2) {
                return family_case(family, rng);
            }
            let build: Box<Builder> = Box::new(|g, v| {
                let h1 = g.conv2d(v[0], v[1], None)?;
                let a = g.relu(h1)?;
                let h2 = g.conv2d(a, v[2], None)?;
                let sq = g.square(h2)?;
                let m = g.mean(sq)?;
                let m = g.add_scalar(m, 1e-3)?;
                g.log10(m)
            });
            (vec![x, w1, w2], build)
        }
    }
}

#[test]
fn autodiff_fidelity() {
    const MAX_SECONDS: f64 = 60.0;
    let names = [
        "elementwise",
        "reductions",
        "conv2d",
        "pool/linear/crop",
        "composite",
    ];
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut rows = Vec::new();
    let mut pass = true;
    for (family, name) in names.iter().enumerate() {
        let mut worst: f64 = 0.0;
        let mut failures = 0;
        for _ in 0..CHECKS_PER_FAMILY {
            let (inputs, build) = family_case(family, &mut rng);
            let w = fd_worst(&inputs, build.as_ref(), &mut rng);
            worst = worst.max(w);
            failures += usize::from(w > FD_TOL);
        }
        pass &= failures == 0;
        rows.push(format!(
            "{name}: {failures}/{CHECKS_PER_FAMILY} failed, worst {worst:.1e}"
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs <= MAX_SECONDS;
    report(
        "autodiff fidelity",
        pass,
        format!(
            "rel tol {FD_TOL:e} (step {FD_STEP:e}); {}; {secs:.1}s (<= {MAX_SECONDS}s)",
            rows.join("; ")
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Model-class containment
// ---------------------------------------------------------------------------

#[test]
fn model_class_containment() {
    const TOL: f64 = 0.02;
    let geom = field();
    let net = PhysicsGradNet::central_difference(PhysicsConfig::default()).unwrap();
    let n = net.n_input_frames();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    let mut rows = Vec::new();
    for case in 0..6 {
        let slope = rng.random_range(0.002..0.01);
        let offset = rng.random_range(0.05..0.3);
        let amp = rng.random_range(0.3..3.0);
        let size = [32, 48, 64][case % 3];
        let frames = (0..n)
            .map(|i| {
                let s: f64 = amp * rng.random_range(-1.0..1.0);
                ImageFrame::from_fn(size, size, i as i64, |x, _| offset + slope * (x as f64 + s))
            })
            .collect();
        let seq = ImageSequence::new(frames, "ramp").unwrap();
        let classical = central(&seq, Roi::new(0, 0, size), &geom);
        let learned = net.predict(&seq, &geom).unwrap();
        let rel = (learned / classical - 1.0).abs();
        worst = worst.max(rel);
        rows.push(format!("{learned:.4e}/{classical:.4e}"));
    }
    let pass = worst <= TOL;
    report(
        "model-class containment",
        pass,
        format!(
            "max rel diff {worst:.2e} (<= {TOL}); net/classical {}",
            rows.join(" ")
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Metric fixtures
// ---------------------------------------------------------------------------

#[test]
fn metric_fixtures() {
    const TOL: f64 = 1e-12;
    struct Fixture {
        pred: [f64; 4],
        truth: [f64; 4],
        domain: MetricDomain,
        // mae, rmse, mape, mase, r2, stdev
        want: [f64; 6],
    }
    let fixtures = [
        // Errors 1, 0, 1, -1; naive one-step error 1.
        Fixture {
            pred: [2.0, 2.0, 4.0, 3.0],
            truth: [1.0, 2.0, 3.0, 4.0],
            domain: MetricDomain::Linear,
            want: [
                0.75,
                0.75f64.sqrt(),
                100.0 * (1.0 + 1.0 / 3.0 + 0.25) / 4.0,
                0.75,
                5.0 / 11.0,
                (11.0f64 / 12.0).sqrt(),
            ],
        },
        // Log errors 0, 1, -1, 0 against log truth 1, 2, 3, 4.
        Fixture {
            pred: [10.0, 1000.0, 100.0, 1e4],
            truth: [10.0, 100.0, 1000.0, 1e4],
            domain: MetricDomain::Log10,
            want: [
                0.5,
                0.5f64.sqrt(),
                100.0 * (0.5 + 1.0 / 3.0) / 4.0,
                0.5,
                0.64,
                (2.0f64 / 3.0).sqrt(),
            ],
        },
        // A constant prediction: zero correlation.
        Fixture {
            pred: [3.0, 3.0, 3.0, 3.0],
            truth: [1.0, 2.0, 4.0, 5.0],
            domain: MetricDomain::Linear,
            want: [
                1.5,
                2.5f64.sqrt(),
                100.0 * (2.0 + 0.5 + 0.25 + 0.4) / 4.0,
                1.125,
                0.0,
                (10.0f64 / 3.0).sqrt(),
            ],
        },
    ];
    let mut worst: f64 = 0.0;
    for f in &fixtures {
        let m = metrics(&f.pred, &f.truth, f.domain).unwrap();
        let got = [m.mae, m.rmse, m.mape, m.mase, m.r2, m.stdev_error];
        for (g, w) in got.iter().zip(f.want) {
            worst = worst.max((g - w).abs());
        }
    }
    let pass = worst <= TOL;
    report(
        "metric fixtures",
        pass,
        format!(
            "{} fixtures, max abs deviation {worst:.1e} (<= {TOL:e})",
            fixtures.len()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Motion degradation ordering
// ---------------------------------------------------------------------------

#[test]
fn motion_degradation_ordering() {
    const MIN_DROP: f64 = 0.2;
    const SHAKE_PX: f64 = 8.0;
    let geom = field();
    let clean = texture(16.0, 0.8).render(256, 256, 31);
    let roi = Roi::centered(256, 256, 192).unwrap();
    let truths: Vec<f64> = (0..9).map(|i| 10f64.powf(-16.0 + 0.5 * i as f64)).collect();
    let mut still = Vec::new();
    let mut shaken = Vec::new();
    let mut stabilized = Vec::new();
    for (i, &cn2) in truths.iter().enumerate() {
        let seed = 4000 + i as u64;
        let (seq, _) = simulate_sequence(&clean, &SimConfig::new(cn2, geom, 64, seed)).unwrap();
        still.push(central(&seq, roi, &geom));
        let cfg = SimConfig::new(cn2, geom, 64, seed).with_motion(SHAKE_PX);
        let (moving, _) = simulate_sequence(&clean, &cfg).unwrap();
        shaken.push(central(&moving, roi, &geom));
        let fixed = stabilize(&moving, &StabilizeConfig::default())
            .unwrap()
            .sequence;
        stabilized.push(central(&fixed, roi, &geom));
    }
    let r2 = |p: &[f64]| metrics(p, &truths, MetricDomain::Log10).unwrap().r2;
    let (r_still, r_shaken, r_stab) = (r2(&still), r2(&shaken), r2(&stabilized));
    let drop_raw = r_still - r_shaken;
    let drop_stab = r_still - r_stab;
    let pass = drop_raw >= MIN_DROP && drop_stab <= 0.5 * drop_raw;
    report(
        "motion degradation ordering",
        pass,
        format!(
            "log10 R2 at 0 px {r_still:.3}, at {SHAKE_PX} px {r_shaken:.3} (drop {drop_raw:.3}, need >= {MIN_DROP}), \
             stabilized {r_stab:.3} (drop {drop_stab:.3}, need <= {:.3})",
            0.5 * drop_raw
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Learned models on simulated scene sweeps
// ---------------------------------------------------------------------------

const SWEEP_SCENES: usize = 24;
const SWEEP_SIZE: usize = 256;
const SWEEP_FRAMES: usize = 30;

#[derive(Clone, Copy)]
enum Family {
    /// Fine, high-contrast texture.
    Fine,
    /// Coarse, low-contrast texture; never seen during training.
    Coarse,
}

/// `SWEEP_SCENES` distinct scenes with Cn2 log-spaced over 1e-15..1e-12.
/// `phase` shifts the sweep so training and test values interleave.
fn sweep(id: &str, family: Family, seed: u64, phase: f64) -> Dataset {
    let geom = field();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases: Vec<SceneCase> = (0..SWEEP_SCENES)
        .map(|i| {
            let t = (i as f64 + phase) / SWEEP_SCENES as f64;
            let cn2 = 10f64.powf(-15.0 + 3.0 * t);
            let scene = match family {
                Family::Fine => texture(rng.random_range(10.0..20.0), rng.random_range(0.5..0.9)),
                Family::Coarse => {
                    texture(rng.random_range(24.0..32.0), rng.random_range(0.15..0.3))
                }
            };
            SceneCase {
                scene,
                scene_seed: rng.random(),
                config: SimConfig::new(cn2, geom, SWEEP_FRAMES, rng.random()),
            }
        })
        .collect();
    simulated_dataset(id, SWEEP_SIZE, geom, &cases).unwrap()
}

fn fine_train() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| sweep("fine-train", Family::Fine, 1, 0.25))
}

fn fine_test() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| sweep("fine-test", Family::Fine, 2, 0.75))
}

fn coarse_test() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| sweep("coarse-test", Family::Coarse, 3, 0.5))
}

fn train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        epochs,
        batch_size: 3,
        seed: 1,
        ..TrainConfig::default()
    }
}

/// The physics network trained once on the fine-texture sweep, with the
/// wall-clock training time.
fn trained_physics() -> &'static (LearnedEstimator<PhysicsGradNet>, f64) {
    static MODEL: OnceLock<(LearnedEstimator<PhysicsGradNet>, f64)> = OnceLock::new();
    MODEL.get_or_init(|| {
        let start = Instant::now();
        let config = PhysicsConfig {
            roi_size: Some(128),
            ..PhysicsConfig::default()
        };
        let net = PhysicsGradNet::new(config, 3).unwrap();
        let mut est = LearnedEstimator::new(net, train_config(30));
        let train_set: Vec<&MinuteSample> = fine_train().minutes.iter().collect();
        est.fit(&train_set, &field()).unwrap();
        (est, start.elapsed().as_secs_f64())
    })
}

fn pooled_r2(est: &impl Cn2Estimator, test: &Dataset) -> (f64, f64) {
    let preds: Vec<Prediction> = test
        .minutes
        .iter()
        .map(|m| Prediction {
            minute_us: m.minute_us,
            truth: m.truth,
            pred: est.predict_minute(m, &test.geometry).ok(),
        })
        .collect();
    assert!(
        preds.iter().all(|p| p.pred.is_some()),
        "a test minute had no prediction"
    );
    let set = MetricSet::from_predictions(&preds);
    (set.linear.unwrap().r2, set.log10.unwrap().r2)
}

#[test]
fn physics_training_sanity() {
    const MIN_R2: f64 = 0.9;
    const MAX_SECONDS: f64 = 15.0 * 60.0;
    let start = Instant::now();
    let (est, train_secs) = trained_physics();
    let (lin, log) = pooled_r2(est, fine_test());
    let secs = start.elapsed().as_secs_f64();
    let pass = log >= MIN_R2 && secs <= MAX_SECONDS;
    report(
        "physics training sanity",
        pass,
        format!(
            "{SWEEP_SCENES} train / {SWEEP_SCENES} test scenes; test log10 R2 {log:.3} (>= {MIN_R2}), linear R2 {lin:.3}; \
             training {train_secs:.0}s, total {secs:.0}s (<= {MAX_SECONDS}s)"
        ),
    );
    assert!(pass);
}

#[test]
fn transfer_generalization_ordering() {
    const MIN_MARGIN: f64 = 0.1;
    let (physics, _) = trained_physics();
    let mut baseline = LearnedEstimator::new(
        BaselineCnn::new(BaselineConfig::default(), 3).unwrap(),
        train_config(20),
    );
    let train_set: Vec<&MinuteSample> = fine_train().minutes.iter().collect();
    baseline.fit(&train_set, &field()).unwrap();

    let (p_lin, p_log) = pooled_r2(physics, coarse_test());
    let (b_lin, b_log) = pooled_r2(&baseline, coarse_test());
    let pass = p_log - b_log >= MIN_MARGIN;
    report(
        "transfer generalization ordering",
        pass,
        format!(
            "disjoint-scene log10 R2 physics {p_log:.3} vs baseline {b_log:.3} (margin {:.3}, need >= {MIN_MARGIN}); \
             linear R2 {p_lin:.3} vs {b_lin:.3}",
            p_log - b_log
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Field dataset (optional)
// ---------------------------------------------------------------------------

/// Runs only when `CN2_FIELD_DATASET` names a converted manifest of the
/// October field capture.
#[test]
fn field_dataset_reproduction() {
    const REFERENCE_MAE: f64 = 7.68e-15;
    const FACTOR: f64 = 2.0;
    let Some(path) = std::env::var_os("CN2_FIELD_DATASET") else {
        println!("[SKIP] field dataset reproduction: set CN2_FIELD_DATASET to a converted manifest to run");
        return;
    };
    let data = load_dataset(std::path::Path::new(&path)).unwrap();
    let est = ClassicalEstimator::new(GradientKernel::IntermediateDifference);
    let preds: Vec<Prediction> = data
        .minutes
        .iter()
        .map(|m| Prediction {
            minute_us: m.minute_us,
            truth: m.truth,
            pred: est.predict_minute(m, &data.geometry).ok(),
        })
        .collect();
    let set = MetricSet::from_predictions(&preds);
    let mae = set.linear.as_ref().map_or(f64::INFINITY, |m| m.mae);
    let pass = mae <= FACTOR * REFERENCE_MAE;
    report(
        "field dataset reproduction",
        pass,
        format!(
            "{} minutes, intermediate-difference MAE {mae:.3e} (<= {FACTOR} x {REFERENCE_MAE:e})",
            data.len()
        ),
    );
    assert!(pass);
}
