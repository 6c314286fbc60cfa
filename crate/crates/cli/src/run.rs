use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cn2_core::eval::{
    ClassicalEstimator, Cn2Estimator, LearnedEstimator, MinuteSample, Prediction,
};
use cn2_core::ingest::{
    cache_crops, convert, format_timestamp, load_dataset, load_minutes, manifest_dir, minute_of,
    parse_timestamp, resolve, save_frame, write_scint_csv, ConvertOptions, GroundTruthSource,
    ScintColumns, MINUTE_US,
};
use cn2_core::models::{load_weights, save_weights, BaselineConfig, PhysicsConfig, TrainReport};
use cn2_core::stabilize::stabilize;
use cn2_core::turbsim::FRAME_INTERVAL_US;
use cn2_core::{
    run_protocol, AnyModel, BaselineCnn, CameraGeometry, DatasetManifest, Error, FrameEntry,
    GradientEstimator, MetricSet, Model, ModelKind, PhysicsGradNet, ProtocolReport, Roi,
    ScintRecord, SimConfig, SplitSpec, StabilizeConfig, TrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::args::*;
use crate::plot::{log_line_chart, Series};

/// Contents of `config.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub version: String,
    #[serde(flatten)]
    pub command: Command,
}

pub fn run(cmd: &Command) -> Result<()> {
    if let Command::Replay(a) = cmd {
        return replay(&a.config);
    }
    let out = cmd
        .out_dir()
        .expect("every non-replay command has an output directory");
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let echo = RunConfig {
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: cmd.clone(),
    };
    write_json(&out.join("config.json"), &echo)?;

    match cmd {
        Command::Simulate(a) => simulate(a),
        Command::Stabilize(a) => stabilize_cmd(a),
        Command::Estimate(a) => estimate(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Report(a) => report(a),
        Command::Ingest(IngestCommand::Convert(a)) => convert_cmd(a),
        Command::Ingest(IngestCommand::Cache(a)) => cache_cmd(a),
        Command::Replay(_) => unreachable!(),
    }
}

fn replay(path: &Path) -> Result<()> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{} is not a run config: {e}", path.display())))?;
    if matches!(cfg.command, Command::Replay(_)) {
        return Err(Error::Config("a replay config cannot itself be replayed".into()).into());
    }
    log::info!(
        "replaying {} run recorded by version {}",
        command_name(&cfg.command),
        cfg.version
    );
    run(&cfg.command)
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Simulate(_) => "simulate",
        Command::Stabilize(_) => "stabilize",
        Command::Estimate(_) => "estimate",
        Command::Train(_) => "train",
        Command::Evaluate(_) => "evaluate",
        Command::Report(_) => "report",
        Command::Ingest(IngestCommand::Convert(_)) => "ingest convert",
        Command::Ingest(IngestCommand::Cache(_)) => "ingest cache",
        Command::Replay(_) => "replay",
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

/// Frames per minute that still fit inside the minute at the simulator's
/// frame rate.
const MAX_FRAMES_PER_MINUTE: usize = (MINUTE_US / FRAME_INTERVAL_US) as usize;

fn simulate(a: &SimulateArgs) -> Result<()> {
    let geom = a.geometry.apply(CameraGeometry::field_default())?;
    if let Some(bad) = a.cn2.iter().find(|c| !(c.is_finite() && **c > 0.0)) {
        return Err(Error::InvalidValue(format!("--cn2 values must be > 0, got {bad}")).into());
    }
    if a.frames > MAX_FRAMES_PER_MINUTE {
        return Err(Error::InvalidValue(format!(
            "--frames {} exceeds the {MAX_FRAMES_PER_MINUTE} frames of one minute",
            a.frames
        ))
        .into());
    }
    let start = parse_timestamp(&a.start)
        .ok_or_else(|| Error::Config(format!("cannot parse --start {:?}", a.start)))?;
    let start = minute_of(start);

    let clean = a.scene().render(a.size, a.size, a.seed);
    let frames_dir = a.out.join("frames");
    fs::create_dir_all(&frames_dir)
        .with_context(|| format!("creating {}", frames_dir.display()))?;

    let mut frames = Vec::new();
    let mut records = Vec::new();
    let mut simulation = Vec::new();
    for (i, &cn2) in a.cn2.iter().enumerate() {
        let minute = start + i as i64 * MINUTE_US;
        let seed = a.seed.wrapping_mul(1_000_003).wrapping_add(i as u64 + 1);
        let cfg = SimConfig {
            start_timestamp_us: minute,
            ..SimConfig::new(cn2, geom, a.frames, seed)
                .with_motion(a.motion)
                .with_correlation_length(a.correlation_length)
        };
        let (seq, truth) = cn2_core::simulate_sequence(&clean, &cfg)?;
        for (j, f) in seq.frames().iter().enumerate() {
            let rel = PathBuf::from("frames").join(format!("m{i:04}_f{j:05}.png"));
            save_frame(f, &a.out.join(&rel))?;
            frames.push(FrameEntry {
                path: rel,
                timestamp_us: f.timestamp_us,
                exposure_s: f.exposure_s,
            });
        }
        records.push(ScintRecord {
            minute_timestamp: minute,
            cn2_min: truth,
            cn2_max: truth,
            cn2: truth,
            cn2_std: 0.0,
        });
        simulation.push(cfg);
        log::info!("minute {i}: cn2 {cn2:e}, {} frames", seq.len());
    }

    write_scint_csv(&a.out.join("scint.csv"), &records)?;
    let manifest = DatasetManifest {
        dataset_id: a.dataset_id.clone(),
        geometry: geom,
        frames,
        scint_log: PathBuf::from("scint.csv"),
        ground_truth: Some(GroundTruthSource::Simulator),
        simulation,
    };
    manifest.write(&a.out.join("manifest.json"))?;
    println!(
        "simulated {} minutes x {} frames into {}",
        a.cn2.len(),
        a.frames,
        a.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// stabilize
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ShiftRow {
    timestamp: String,
    frame: usize,
    coarse_dx: f64,
    coarse_dy: f64,
    fine_dx: f64,
    fine_dy: f64,
    degenerate: bool,
}

fn stabilize_cmd(a: &StabilizeArgs) -> Result<()> {
    let manifest = DatasetManifest::read(&a.manifest)?;
    let base = manifest_dir(&a.manifest);
    let minutes = load_minutes(&manifest, &base)?;
    if minutes.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "'{}' has no minute with two readable frames",
            manifest.dataset_id
        ))
        .into());
    }
    let cfg = StabilizeConfig {
        anchor: a.anchor,
        reference_index: a.reference,
        max_shift: a.max_shift,
        coarse: !a.no_coarse,
        fine: !a.no_fine,
        ncc_threshold: a.ncc_threshold,
    };

    let frames_dir = a.out.join("frames");
    fs::create_dir_all(&frames_dir)
        .with_context(|| format!("creating {}", frames_dir.display()))?;
    let mut shifts = csv_writer(&a.out.join("shifts.csv"))?;
    let mut frames = Vec::new();
    let mut skipped = 0;
    for (i, (minute, seq)) in minutes.iter().enumerate() {
        let rep = match stabilize(seq, &cfg) {
            Ok(r) => r,
            Err(e) if e.is_validation() => return Err(e.into()),
            Err(e) => {
                log::warn!("minute {} not stabilized: {e}", format_timestamp(*minute));
                skipped += 1;
                continue;
            }
        };
        for (j, f) in rep.sequence.frames().iter().enumerate() {
            let rel = PathBuf::from("frames").join(format!("m{i:04}_f{j:05}.png"));
            save_frame(f, &a.out.join(&rel))?;
            frames.push(FrameEntry {
                path: rel,
                timestamp_us: f.timestamp_us,
                exposure_s: f.exposure_s,
            });
            let coarse = rep.coarse_shifts.get(j).copied().unwrap_or_default();
            let fine = rep.fine_shifts.get(j).copied().unwrap_or_default();
            shifts.serialize(ShiftRow {
                timestamp: format_timestamp(f.timestamp_us),
                frame: j,
                coarse_dx: coarse.dx,
                coarse_dy: coarse.dy,
                fine_dx: fine.dx,
                fine_dy: fine.dy,
                degenerate: rep.degenerate_frames.contains(&j),
            })?;
        }
    }
    shifts.flush()?;

    // Carry the truth log along so the output is a complete dataset.
    let source_scint = resolve(&base, &manifest.scint_log);
    let scint_log = if source_scint.is_file() {
        fs::copy(&source_scint, a.out.join("scint.csv"))
            .with_context(|| format!("copying {}", source_scint.display()))?;
        PathBuf::from("scint.csv")
    } else {
        log::warn!(
            "scintillometer log {} not found; keeping its path",
            source_scint.display()
        );
        source_scint
    };
    let out_manifest = DatasetManifest {
        frames,
        scint_log,
        ..manifest
    };
    out_manifest.write(&a.out.join("manifest.json"))?;
    println!(
        "stabilized {} of {} minutes into {}",
        minutes.len() - skipped,
        minutes.len(),
        a.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// estimate
// ---------------------------------------------------------------------------

type Predictor<'a> = dyn Fn(&cn2_core::ImageSequence) -> cn2_core::Result<f64> + 'a;

#[derive(Serialize)]
struct EstimateRow {
    timestamp: String,
    cn2: Option<f64>,
    kernel: String,
    n_frames: usize,
}

fn estimate(a: &EstimateArgs) -> Result<()> {
    let manifest = DatasetManifest::read(&a.manifest)?;
    let geom = a.geometry.apply(manifest.geometry)?;
    let minutes = load_minutes(&manifest, &manifest_dir(&a.manifest))?;
    let model = a.weights.as_deref().map(load_weights).transpose()?;

    let mut rows = Vec::new();
    for (minute, seq) in &minutes {
        let (label, groups, predict): (String, _, Box<Predictor>) = match &model {
            Some(m) => {
                let seq = match a.roi {
                    Some(r) => seq.crop(r)?,
                    None => seq.clone(),
                };
                let groups = seq.chunks(m.n_input_frames())?;
                (
                    m.kind().to_string(),
                    groups,
                    Box::new(move |g| m.predict(g, &geom)),
                )
            }
            None => {
                let roi = match a.roi {
                    Some(r) => r,
                    None => {
                        let size = Roi::DEFAULT_SIZE.min(seq.width()).min(seq.height());
                        Roi::centered(seq.width(), seq.height(), size)?
                    }
                };
                let est = GradientEstimator::new(a.kernel, roi, geom);
                let groups = match a.group_size {
                    Some(n) => seq.chunks(n)?,
                    None => vec![seq.clone()],
                };
                (
                    a.kernel.name().to_string(),
                    groups,
                    Box::new(move |g| est.estimate(g).map(|e| e.value)),
                )
            }
        };
        if groups.is_empty() {
            log::warn!(
                "minute {} has {} frames, too few for one group",
                format_timestamp(*minute),
                seq.len()
            );
        }
        for g in groups {
            let cn2 = match predict(&g) {
                Ok(v) => Some(v),
                Err(e) if e.is_validation() => return Err(e.into()),
                Err(e) => {
                    log::warn!(
                        "no estimate at {}: {e}",
                        format_timestamp(g.middle_timestamp())
                    );
                    None
                }
            };
            rows.push(EstimateRow {
                timestamp: format_timestamp(g.middle_timestamp()),
                cn2,
                kernel: label.clone(),
                n_frames: g.len(),
            });
        }
    }

    let mut w = csv_writer(&a.out.join("estimates.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let gaps = rows.iter().filter(|r| r.cn2.is_none()).count();
    println!(
        "{} estimates ({} gaps) over {} minutes written to {}",
        rows.len(),
        gaps,
        minutes.len(),
        a.out.join("estimates.csv").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train / evaluate
// ---------------------------------------------------------------------------

fn build_model(kind: ModelArg, t: &TrainingArgs) -> Result<AnyModel> {
    Ok(match kind {
        ModelArg::Physics => {
            let cfg = PhysicsConfig {
                n_input_frames: t.n_frames,
                roi_size: t.roi_size,
                ..Default::default()
            };
            AnyModel::Physics(PhysicsGradNet::new(cfg, t.init_seed)?)
        }
        ModelArg::Baseline => {
            AnyModel::Baseline(BaselineCnn::new(BaselineConfig::default(), t.init_seed)?)
        }
        ModelArg::Classical => {
            return Err(
                Error::Config("the classical estimator has no weights to train".into()).into(),
            )
        }
    })
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    model: ModelKind,
    dataset: &'a str,
    n_minutes: usize,
    n_samples: usize,
    config: &'a TrainConfig,
    final_loss: Option<f64>,
    #[serde(flatten)]
    report: &'a TrainReport,
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let data = load_dataset(&a.manifest)?;
    let model = build_model(a.model, &a.training)?;
    let mut est = LearnedEstimator::new(model, a.training.train_config());
    let minutes: Vec<&MinuteSample> = data.minutes.iter().collect();
    let n_samples = est.samples(&minutes, &data.geometry)?.len();
    est.fit(&minutes, &data.geometry)?;
    let trained = est.trained.as_ref().expect("fit stores the trained model");
    let report = est.last_report.as_ref().expect("fit stores its report");

    save_weights(trained, &a.out.join("model.weights"))?;
    write_json(
        &a.out.join("train_report.json"),
        &TrainSummary {
            model: trained.kind(),
            dataset: &data.id,
            n_minutes: data.len(),
            n_samples,
            config: &est.config,
            final_loss: report.loss_history.last().copied(),
            report,
        },
    )?;
    println!(
        "trained {} on {} samples from {} minutes; final loss {:.6}",
        trained.kind(),
        n_samples,
        data.len(),
        report.loss_history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let train = load_dataset(&a.train)?;
    let test = a.test.as_deref().map(load_dataset).transpose()?;
    let spec = match a.protocol {
        ProtocolArg::Interpolation => SplitSpec::Interpolation {
            train_block: a.train_block,
            test_block: a.test_block,
        },
        ProtocolArg::Kfold => SplitSpec::Kfold { k: a.k },
        ProtocolArg::Transfer => SplitSpec::Transfer {
            train_dataset: train.id.clone(),
            test_dataset: test
                .as_ref()
                .map(|t| t.id.clone())
                .ok_or_else(|| Error::Config("--protocol transfer needs --test".into()))?,
        },
    };

    let report = match a.model {
        ModelArg::Classical => {
            if a.weights.is_some() {
                return Err(Error::Config(
                    "--weights does not apply to the classical estimator".into(),
                )
                .into());
            }
            let est = ClassicalEstimator {
                kernel: a.kernel,
                roi: None,
                group_frames: a.group_size,
            };
            run(&est, &train, test.as_ref(), &spec)?
        }
        kind => {
            let est = match &a.weights {
                Some(path) => {
                    let model = load_weights(path)?;
                    let wanted = if kind == ModelArg::Physics {
                        ModelKind::Physics
                    } else {
                        ModelKind::Baseline
                    };
                    if model.kind() != wanted {
                        return Err(Error::Config(format!(
                            "{} holds a {} model, not {wanted}",
                            path.display(),
                            model.kind()
                        ))
                        .into());
                    }
                    LearnedEstimator::frozen(model)
                }
                None => LearnedEstimator::new(
                    build_model(kind, &a.training)?,
                    a.training.train_config(),
                ),
            };
            run(&est, &train, test.as_ref(), &spec)?
        }
    };

    fn run<E: Cn2Estimator>(
        est: &E,
        train: &cn2_core::Dataset,
        test: Option<&cn2_core::Dataset>,
        spec: &SplitSpec,
    ) -> Result<ProtocolReport> {
        Ok(run_protocol(est, train, test, spec)?)
    }

    write_json(&a.out.join("report.json"), &report)?;
    let predictions = report.predictions();
    write_predictions(&a.out.join("predictions.csv"), &predictions)?;
    if !a.no_plot {
        let title = format!(
            "{} / {} ({})",
            report.estimator, report.test_dataset, report.protocol
        );
        fs::write(
            a.out.join("plot.svg"),
            prediction_chart(&title, &predictions),
        )?;
    }
    for f in report.folds.iter().filter(|f| f.error.is_some()) {
        log::warn!(
            "fold {}: {}",
            f.index,
            f.error.as_deref().unwrap_or_default()
        );
    }
    print_metrics(&report.pooled);
    if report.partial {
        println!("warning: some test minutes have no prediction");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct PredictionRow {
    minute_timestamp: String,
    truth: f64,
    pred: Option<f64>,
}

fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for p in preds {
        w.serialize(PredictionRow {
            minute_timestamp: format_timestamp(p.minute_us),
            truth: p.truth,
            pred: p.pred,
        })?;
    }
    w.flush()?;
    Ok(())
}

fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let mut r =
        csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, row) in r.deserialize::<PredictionRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let minute_us = parse_timestamp(&row.minute_timestamp).ok_or_else(|| Error::Parse {
            line,
            message: format!("bad timestamp {:?}", row.minute_timestamp),
        })?;
        out.push(Prediction {
            minute_us,
            truth: row.truth,
            pred: row.pred,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyInput(format!("{} has no predictions", path.display())).into());
    }
    Ok(out)
}

fn prediction_chart(title: &str, preds: &[Prediction]) -> String {
    let t0 = preds.iter().map(|p| p.minute_us).min().unwrap_or(0);
    let x = |p: &Prediction| (p.minute_us - t0) as f64 / MINUTE_US as f64;
    let series = [
        Series {
            label: "truth".into(),
            color: "#1f77b4",
            points: preds.iter().map(|p| (x(p), p.truth)).collect(),
        },
        Series {
            label: "prediction".into(),
            color: "#d62728",
            points: preds
                .iter()
                .map(|p| (x(p), p.pred.unwrap_or(f64::NAN)))
                .collect(),
        },
    ];
    log_line_chart(title, "minutes", "Cn2 (m^-2/3)", &series)
}

fn print_metrics(m: &MetricSet) {
    for (name, r) in [("linear", &m.linear), ("log10", &m.log10)] {
        if let Some(r) = r {
            println!(
                "{name:>6}: n={} R2={:.4} MAE={:.4e} RMSE={:.4e} MAPE={:.2}%",
                r.n, r.r2, r.mae, r.rmse, r.mape
            );
        }
    }
    for n in &m.notes {
        println!("note: {n}");
    }
}

fn report(a: &ReportArgs) -> Result<()> {
    let preds = read_predictions(&a.predictions)?;
    let metrics = MetricSet::from_predictions(&preds);
    write_json(&a.out.join("metrics.json"), &metrics)?;
    fs::write(a.out.join("plot.svg"), prediction_chart(&a.title, &preds))?;
    print_metrics(&metrics);
    Ok(())
}

// ---------------------------------------------------------------------------
// ingest
// ---------------------------------------------------------------------------

fn convert_cmd(a: &ConvertArgs) -> Result<()> {
    let opts = ConvertOptions {
        dataset_id: a.dataset_id.clone(),
        geometry: a.geometry.apply(CameraGeometry::field_default())?,
        frames_dir: a.frames_dir.clone(),
        filename_format: a.filename_format.clone(),
        fps: a.fps,
        scint_source: a.scint.clone(),
        columns: ScintColumns {
            timestamp: a.timestamp_column.clone(),
            cn2: a.cn2_column.clone(),
            cn2_min: a.cn2_min_column.clone(),
            cn2_max: a.cn2_max_column.clone(),
            cn2_std: a.cn2_std_column.clone(),
        },
        delimiter: a.delimiter,
        timestamp_format: a.timestamp_format.clone(),
    };
    let rep = convert(&opts, &a.out)?;
    for f in &rep.skipped_files {
        log::warn!("skipped {}", f.display());
    }
    println!(
        "{} frames and {} scintillometer minutes written to {}",
        rep.frames,
        rep.scint_records,
        rep.manifest_path.display()
    );
    Ok(())
}

fn cache_cmd(a: &CacheArgs) -> Result<()> {
    let rep = cache_crops(&a.manifest, a.roi, &a.out)?;
    for s in &rep.skipped {
        log::warn!("skipped {}: {}", s.path.display(), s.reason);
    }
    println!(
        "{} written, {} reused, {} skipped; manifest {}",
        rep.written,
        rep.reused,
        rep.skipped.len(),
        rep.manifest_path.display()
    );
    Ok(())
}
