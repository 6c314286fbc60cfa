use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cn2_core::ingest::save_frame;
use cn2_core::ImageFrame;
use serde_json::Value;
use tempfile::TempDir;

fn cn2(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cn2"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = cn2(args);
    assert!(
        out.status.success(),
        "cn2 {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Six simulated minutes of 128x128 frames.
fn simulate(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec![
        "simulate",
        "--cn2",
        "1e-15,3e-15,1e-14,3e-14,1e-13,3e-13",
        "--frames",
        "20",
        "--size",
        "128",
        "--out",
        p(&out),
    ];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

fn log_mae(report: &Value) -> f64 {
    report["pooled"]["log10"]["mae"].as_f64().unwrap()
}

// ---------------------------------------------------------------------------
// Exit codes
// ---------------------------------------------------------------------------

#[test]
fn help_and_version_exit_zero_on_stdout() {
    let help = cn2(&["--help"]);
    assert_eq!(code(&help), 0);
    assert!(String::from_utf8_lossy(&help.stdout).contains("Usage"));
    let version = cn2(&["--version"]);
    assert_eq!(code(&version), 0);
    assert!(String::from_utf8_lossy(&version.stdout).starts_with("cn2 "));
}

#[test]
fn bad_arguments_exit_one() {
    assert_eq!(code(&cn2(&["frobnicate"])), 1);
    assert_eq!(
        code(&cn2(&[
            "estimate",
            "--kernel",
            "laplace",
            "--manifest",
            "m",
            "--out",
            "o"
        ])),
        1
    );
    let out = cn2(&["simulate", "--out", "x"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--cn2"));
}

#[test]
fn invalid_input_exits_one_and_runtime_failure_two() {
    let dir = TempDir::new().unwrap();
    let sim = simulate(dir.path(), "sim", &[]);
    let manifest = sim.join("manifest.json");

    let roi = cn2(&[
        "estimate",
        "--manifest",
        p(&manifest),
        "--roi",
        "0,0,999",
        "--out",
        p(&dir.path().join("e")),
    ]);
    assert_eq!(code(&roi), 1, "{}", String::from_utf8_lossy(&roi.stderr));

    let transfer = cn2(&[
        "evaluate",
        "--protocol",
        "transfer",
        "--model",
        "classical",
        "--train",
        p(&manifest),
        "--out",
        p(&dir.path().join("t")),
    ]);
    assert_eq!(code(&transfer), 1);

    let cn2_zero = cn2(&["simulate", "--cn2", "0", "--out", p(&dir.path().join("z"))]);
    assert_eq!(code(&cn2_zero), 1);

    let missing = cn2(&[
        "estimate",
        "--manifest",
        p(&dir.path().join("nope.json")),
        "--out",
        p(&dir.path().join("m")),
    ]);
    assert_eq!(code(&missing), 2);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.json"));
}

// ---------------------------------------------------------------------------
// Outputs and replay
// ---------------------------------------------------------------------------

#[test]
fn simulate_writes_a_complete_dataset() {
    let dir = TempDir::new().unwrap();
    let sim = simulate(dir.path(), "sim", &[]);
    let manifest = json(&sim.join("manifest.json"));
    assert_eq!(manifest["frames"].as_array().unwrap().len(), 120);
    assert_eq!(manifest["ground_truth"], "simulator");
    assert_eq!(manifest["simulation"].as_array().unwrap().len(), 6);

    let scint = fs::read_to_string(sim.join("scint.csv")).unwrap();
    let lines: Vec<&str> = scint.lines().collect();
    assert_eq!(lines[0], "timestamp,cn2_min,cn2_max,cn2,cn2_std");
    assert_eq!(lines.len(), 7);
    assert!(lines[1].starts_with("2024-01-01T00:00:00Z,1e-15"));

    let config = json(&sim.join("config.json"));
    assert_eq!(config["command"], "simulate");
    assert_eq!(config["frames"], 20);
}

#[test]
fn replay_reproduces_outputs_bit_for_bit() {
    let dir = TempDir::new().unwrap();
    let sim = simulate(dir.path(), "sim", &["--motion", "2", "--seed", "7"]);
    let est_dir = dir.path().join("est");
    ok(&[
        "estimate",
        "--manifest",
        p(&sim.join("manifest.json")),
        "--kernel",
        "prewitt",
        "--group-size",
        "10",
        "--out",
        p(&est_dir),
    ]);
    let frame = sim.join("frames/m0003_f00011.png");
    let before_frame = fs::read(&frame).unwrap();
    let before_est = fs::read(est_dir.join("estimates.csv")).unwrap();

    ok(&["replay", p(&sim.join("config.json"))]);
    ok(&["replay", p(&est_dir.join("config.json"))]);
    assert_eq!(fs::read(&frame).unwrap(), before_frame);
    assert_eq!(fs::read(est_dir.join("estimates.csv")).unwrap(), before_est);

    let rows = String::from_utf8(before_est).unwrap();
    let mut lines = rows.lines();
    assert_eq!(lines.next(), Some("timestamp,cn2,kernel,n_frames"));
    assert_eq!(lines.clone().count(), 12);
    assert!(lines.all(|l| l.ends_with(",prewitt,10")));
}

#[test]
fn replay_rejects_foreign_json() {
    let dir = TempDir::new().unwrap();
    let bogus = dir.path().join("config.json");
    fs::write(&bogus, r#"{"hello": 1}"#).unwrap();
    assert_eq!(code(&cn2(&["replay", p(&bogus)])), 1);
}

#[test]
fn evaluate_and_report_agree() {
    let dir = TempDir::new().unwrap();
    let sim = simulate(dir.path(), "sim", &[]);
    let ev = dir.path().join("ev");
    ok(&[
        "evaluate",
        "--model",
        "classical",
        "--protocol",
        "kfold",
        "--k",
        "3",
        "--train",
        p(&sim.join("manifest.json")),
        "--out",
        p(&ev),
    ]);
    let report = json(&ev.join("report.json"));
    assert_eq!(report["protocol"], "kfold");
    assert_eq!(report["folds"].as_array().unwrap().len(), 3);
    assert!(fs::read_to_string(ev.join("plot.svg"))
        .unwrap()
        .starts_with("<svg"));
    let preds = fs::read_to_string(ev.join("predictions.csv")).unwrap();
    assert!(preds.starts_with("minute_timestamp,truth,pred\n"));
    assert_eq!(preds.lines().count(), 7);

    let rep = dir.path().join("rep");
    ok(&[
        "report",
        "--predictions",
        p(&ev.join("predictions.csv")),
        "--out",
        p(&rep),
    ]);
    let metrics = json(&rep.join("metrics.json"));
    assert_eq!(metrics, report["pooled"]);
    assert!(rep.join("plot.svg").is_file());
}

#[test]
fn trained_weights_evaluate_frozen() {
    let dir = TempDir::new().unwrap();
    let sim = simulate(dir.path(), "sim", &[]);
    let manifest = sim.join("manifest.json");
    let tr = dir.path().join("tr");
    ok(&[
        "train",
        "--manifest",
        p(&manifest),
        "--epochs",
        "2",
        "--roi-size",
        "96",
        "--out",
        p(&tr),
    ]);
    let summary = json(&tr.join("train_report.json"));
    assert_eq!(summary["model"], "physics");
    assert_eq!(summary["n_samples"], 12);
    assert_eq!(summary["loss_history"].as_array().unwrap().len(), 2);

    let weights = tr.join("model.weights");
    let ev = dir.path().join("ev");
    ok(&[
        "evaluate",
        "--model",
        "physics",
        "--weights",
        p(&weights),
        "--train",
        p(&manifest),
        "--no-plot",
        "--out",
        p(&ev),
    ]);
    assert!(ev.join("report.json").is_file());
    assert!(!ev.join("plot.svg").exists());

    let est = dir.path().join("est");
    ok(&[
        "estimate",
        "--manifest",
        p(&manifest),
        "--weights",
        p(&weights),
        "--out",
        p(&est),
    ]);
    let rows = fs::read_to_string(est.join("estimates.csv")).unwrap();
    assert_eq!(rows.lines().count(), 13);
    assert!(rows.lines().skip(1).all(|l| l.ends_with(",physics,10")));

    let wrong = cn2(&[
        "evaluate",
        "--model",
        "baseline",
        "--weights",
        p(&weights),
        "--train",
        p(&manifest),
        "--out",
        p(&dir.path().join("w")),
    ]);
    assert_eq!(code(&wrong), 1);
}

#[test]
fn stabilizing_shaken_frames_improves_the_classical_estimate() {
    let dir = TempDir::new().unwrap();
    let shaken = simulate(dir.path(), "shaken", &["--motion", "4"]);
    let st = dir.path().join("st");
    ok(&[
        "stabilize",
        "--manifest",
        p(&shaken.join("manifest.json")),
        "--out",
        p(&st),
    ]);
    let shifts = fs::read_to_string(st.join("shifts.csv")).unwrap();
    assert_eq!(shifts.lines().count(), 121);

    let eval = |manifest: &Path, name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "evaluate",
            "--model",
            "classical",
            "--train",
            p(manifest),
            "--no-plot",
            "--out",
            p(&out),
        ]);
        log_mae(&json(&out.join("report.json")))
    };
    let raw = eval(&shaken.join("manifest.json"), "raw");
    let fixed = eval(&st.join("manifest.json"), "fixed");
    assert!(fixed < raw, "stabilized log MAE {fixed} vs raw {raw}");
}

// ---------------------------------------------------------------------------
// Ingest
// ---------------------------------------------------------------------------

#[test]
fn convert_then_cache_then_estimate() {
    let dir = TempDir::new().unwrap();
    let raw = dir.path().join("raw");
    fs::create_dir_all(&raw).unwrap();
    for minute in 0..2 {
        for k in 0..4 {
            let f = ImageFrame::from_fn(64, 64, 0, |x, y| {
                0.5 + 0.3
                    * ((x as f64 + (4 * minute + k) as f64 * 0.3) / 5.0).sin()
                    * (y as f64 / 7.0).cos()
            });
            save_frame(
                &f,
                &raw.join(format!("cam_20240301_10{minute:02}{:02}.png", 10 + k)),
            )
            .unwrap();
        }
    }
    let log = dir.path().join("log.txt");
    fs::write(
        &log,
        "time;Cn2\n2024-03-01 10:00:00;2.5e-14\n2024-03-01 10:01:00;4.0e-14\n2024-03-01 10:02:00;5.0e-14\n",
    )
    .unwrap();

    let conv = dir.path().join("conv");
    ok(&[
        "ingest",
        "convert",
        "--frames-dir",
        p(&raw),
        "--filename-format",
        "cam_%Y%m%d_%H%M%S",
        "--scint",
        p(&log),
        "--timestamp-column",
        "time",
        "--cn2-column",
        "Cn2",
        "--delimiter",
        ";",
        "--out",
        p(&conv),
    ]);
    let manifest = json(&conv.join("manifest.json"));
    assert_eq!(manifest["frames"].as_array().unwrap().len(), 8);
    assert_eq!(
        fs::read_to_string(conv.join("scint.csv"))
            .unwrap()
            .lines()
            .count(),
        4
    );

    let cache_root = dir.path().join("cache");
    let first = ok(&[
        "ingest",
        "cache",
        "--manifest",
        p(&conv.join("manifest.json")),
        "--roi",
        "8,8,32",
        "--out",
        p(&cache_root),
    ]);
    assert!(String::from_utf8_lossy(&first.stdout).starts_with("8 written, 0 reused"));
    let second = ok(&[
        "ingest",
        "cache",
        "--manifest",
        p(&conv.join("manifest.json")),
        "--roi",
        "8,8,32",
        "--out",
        p(&cache_root),
    ]);
    assert!(String::from_utf8_lossy(&second.stdout).starts_with("0 written, 8 reused"));

    let cached: Vec<PathBuf> = fs::read_dir(&cache_root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    assert_eq!(cached.len(), 1);
    let est = dir.path().join("est");
    ok(&[
        "estimate",
        "--manifest",
        p(&cached[0].join("manifest.json")),
        "--out",
        p(&est),
    ]);
    let rows = fs::read_to_string(est.join("estimates.csv")).unwrap();
    assert_eq!(rows.lines().count(), 3);
}
