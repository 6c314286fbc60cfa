//! One-shot adaptation of a raw capture (an image directory plus an
//! instrument log with arbitrary column names) into a manifest and a
//! normalized scintillometer CSV.

use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, FrameEntry, GroundTruthSource};
use super::scint::{minute_of, parse_timestamp, write_scint_csv, ScintRecord};
use crate::error::{Error, Result};
use crate::geometry::CameraGeometry;

/// Names of the source log's columns. Missing min/max fall back to the
/// Cn2 value and a missing spread to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScintColumns {
    pub timestamp: String,
    pub cn2: String,
    #[serde(default)]
    pub cn2_min: Option<String>,
    #[serde(default)]
    pub cn2_max: Option<String>,
    #[serde(default)]
    pub cn2_std: Option<String>,
}

impl Default for ScintColumns {
    fn default() -> Self {
        Self {
            timestamp: "timestamp".into(),
            cn2: "cn2".into(),
            cn2_min: Some("cn2_min".into()),
            cn2_max: Some("cn2_max".into()),
            cn2_std: Some("cn2_std".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvertOptions {
    pub dataset_id: String,
    pub geometry: CameraGeometry,
    pub frames_dir: PathBuf,
    /// chrono format matched against each file stem, e.g. `%Y%m%d_%H%M%S%.f`.
    pub filename_format: String,
    /// Frames whose names give the same instant are spread `1/fps` apart in
    /// file-name order.
    #[serde(default)]
    pub fps: Option<f64>,
    pub scint_source: PathBuf,
    #[serde(default)]
    pub columns: ScintColumns,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    /// chrono format of the log's timestamps; ISO-8601 when absent.
    #[serde(default)]
    pub timestamp_format: Option<String>,
}

fn default_delimiter() -> char {
    ','
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvertReport {
    pub manifest_path: PathBuf,
    pub scint_path: PathBuf,
    pub frames: usize,
    pub skipped_files: Vec<PathBuf>,
    pub scint_records: usize,
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "tif", "tiff"];

fn frame_entries(opts: &ConvertOptions) -> Result<(Vec<FrameEntry>, Vec<PathBuf>)> {
    let dir = &opts.frames_dir;
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| e.eq_ignore_ascii_case(x)))
        })
        .collect();
    files.sort();
    let mut frames = Vec::new();
    let mut skipped = Vec::new();
    let mut last: Option<(i64, usize)> = None;
    for path in files {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default();
        let Ok(t) = NaiveDateTime::parse_from_str(stem, &opts.filename_format) else {
            log::warn!(
                "{}: name does not match '{}'",
                path.display(),
                opts.filename_format
            );
            skipped.push(path);
            continue;
        };
        let base = t.and_utc().timestamp_micros();
        let repeat = match last {
            Some((b, k)) if b == base => k + 1,
            _ => 0,
        };
        last = Some((base, repeat));
        let offset = match opts.fps {
            Some(fps) if repeat > 0 => (repeat as f64 * 1e6 / fps).round() as i64,
            _ => 0,
        };
        let path = std::fs::canonicalize(&path).unwrap_or(path);
        frames.push(FrameEntry {
            path,
            timestamp_us: base + offset,
            exposure_s: None,
        });
    }
    frames.sort_by_key(|f| f.timestamp_us);
    Ok((frames, skipped))
}

fn convert_scint(opts: &ConvertOptions) -> Result<Vec<ScintRecord>> {
    let path = &opts.scint_source;
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let delimiter = u8::try_from(opts.delimiter).map_err(|_| {
        Error::Config(format!(
            "delimiter '{}' is not a single byte",
            opts.delimiter
        ))
    })?;
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse {
                line: 1,
                message: format!("column '{name}' not found"),
            })
    };
    let optional = |name: &Option<String>| name.as_deref().map(column).transpose();
    let c = &opts.columns;
    let (ts_col, cn2_col) = (column(&c.timestamp)?, column(&c.cn2)?);
    let (min_col, max_col, std_col) = (
        optional(&c.cn2_min)?,
        optional(&c.cn2_max)?,
        optional(&c.cn2_std)?,
    );

    let mut by_minute = std::collections::BTreeMap::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let raw_ts = &row[ts_col];
        let ts = match &opts.timestamp_format {
            Some(fmt) => NaiveDateTime::parse_from_str(raw_ts, fmt)
                .ok()
                .map(|t| t.and_utc().timestamp_micros()),
            None => parse_timestamp(raw_ts),
        }
        .ok_or_else(|| Error::Parse {
            line,
            message: format!("bad timestamp '{raw_ts}'"),
        })?;
        let num = |k: usize| {
            row[k].parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("bad number '{}' in column {}", &row[k], &headers[k]),
            })
        };
        let cn2 = num(cn2_col)?;
        let rec = ScintRecord {
            minute_timestamp: minute_of(ts),
            cn2_min: min_col.map_or(Ok(cn2), num)?,
            cn2_max: max_col.map_or(Ok(cn2), num)?,
            cn2,
            cn2_std: std_col.map_or(Ok(0.0), num)?,
        };
        match rec.validate() {
            Ok(()) => {
                by_minute.insert(rec.minute_timestamp, rec);
            }
            Err(e) => log::warn!("line {line} dropped: {e}"),
        }
    }
    Ok(by_minute.into_values().collect())
}

/// Writes `manifest.json` and `scint.csv` into `out_dir`.
pub fn convert(opts: &ConvertOptions, out_dir: &Path) -> Result<ConvertReport> {
    opts.geometry.validate()?;
    let (frames, skipped_files) = frame_entries(opts)?;
    if frames.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no frame in {} matched '{}'",
            opts.frames_dir.display(),
            opts.filename_format
        )));
    }
    let records = convert_scint(opts)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let scint_path = out_dir.join("scint.csv");
    write_scint_csv(&scint_path, &records)?;
    let manifest = DatasetManifest {
        dataset_id: opts.dataset_id.clone(),
        geometry: opts.geometry,
        frames,
        scint_log: "scint.csv".into(),
        ground_truth: Some(GroundTruthSource::Scintillometer),
        simulation: vec![],
    };
    let manifest_path = out_dir.join("manifest.json");
    manifest.write(&manifest_path)?;
    Ok(ConvertReport {
        manifest_path,
        scint_path,
        frames: manifest.frames.len(),
        skipped_files,
        scint_records: records.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::ImageFrame;
    use crate::ingest::raster::save_frame;
    use crate::ingest::scint::load_scint_csv;

    #[test]
    fn converts_named_frames_and_renamed_columns() {
        let dir = tempfile::tempdir().unwrap();
        let frames_dir = dir.path().join("raw");
        std::fs::create_dir(&frames_dir).unwrap();
        let f = ImageFrame::from_fn(8, 8, 0, |x, _| x as f64 / 8.0);
        for name in [
            "20201001_120300",
            "20201001_120300 ",
            "20201001_120301",
            "notes",
        ] {
            save_frame(&f, &frames_dir.join(format!("{}.png", name.trim()))).unwrap();
        }
        let log = dir.path().join("log.txt");
        std::fs::write(
            &log,
            "Time;Cn2;Cn2Min;Cn2Max\n01/10/2020 12:03;2e-15;1e-15;3e-15\n01/10/2020 12:04;0;0;0\n",
        )
        .unwrap();
        let opts = ConvertOptions {
            dataset_id: "oct".into(),
            geometry: CameraGeometry::field_default(),
            frames_dir,
            filename_format: "%Y%m%d_%H%M%S".into(),
            fps: Some(120.0),
            scint_source: log,
            columns: ScintColumns {
                timestamp: "Time".into(),
                cn2: "Cn2".into(),
                cn2_min: Some("Cn2Min".into()),
                cn2_max: Some("Cn2Max".into()),
                cn2_std: None,
            },
            delimiter: ';',
            timestamp_format: Some("%d/%m/%Y %H:%M".into()),
        };
        let out = dir.path().join("out");
        let r = convert(&opts, &out).unwrap();
        assert_eq!(r.frames, 2);
        assert_eq!(r.skipped_files.len(), 1);
        assert_eq!(r.scint_records, 1);
        let m = DatasetManifest::read(&r.manifest_path).unwrap();
        assert_eq!(
            m.frames[1].timestamp_us - m.frames[0].timestamp_us,
            1_000_000
        );
        let s = load_scint_csv(&r.scint_path).unwrap();
        assert_eq!((s[0].cn2, s[0].cn2_std), (2e-15, 0.0));
    }
}
