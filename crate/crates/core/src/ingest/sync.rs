use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;

use super::manifest::{manifest_dir, resolve, DatasetManifest, FrameEntry};
use super::raster::load_frame;
use super::scint::{format_timestamp, load_scint_csv, minute_of, ScintRecord};
use crate::error::{Error, Result};
use crate::eval::{Dataset, MinuteSample};
use crate::imaging::ImageSequence;

pub const DEFAULT_GROUP_SIZE: usize = 3;

/// Consecutive frames of one minute, paired with that minute's record.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameGroup {
    pub minute_timestamp: i64,
    pub record: ScintRecord,
    pub frames: Vec<FrameEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncReport {
    pub groups: Vec<FrameGroup>,
    /// Minutes with frames but no scintillometer record.
    pub dropped_minutes: usize,
    /// Frames left over after filling whole groups, plus frames of
    /// dropped minutes.
    pub dropped_frames: usize,
}

/// Frames bucketed by the minute their timestamp falls in.
fn by_minute(manifest: &DatasetManifest) -> BTreeMap<i64, Vec<FrameEntry>> {
    let mut out: BTreeMap<i64, Vec<FrameEntry>> = BTreeMap::new();
    for f in &manifest.frames {
        out.entry(minute_of(f.timestamp_us))
            .or_default()
            .push(f.clone());
    }
    out
}

/// Pairs frame groups with scintillometer minutes. Each minute's frames are
/// cut into consecutive groups of `group_size`; a remainder is dropped.
pub fn synchronize(
    manifest: &DatasetManifest,
    scint: &[ScintRecord],
    group_size: usize,
) -> Result<SyncReport> {
    if group_size < 2 {
        return Err(Error::Config(format!(
            "group_size must be >= 2, got {group_size}"
        )));
    }
    let records: HashMap<i64, &ScintRecord> =
        scint.iter().map(|r| (r.minute_timestamp, r)).collect();
    let mut report = SyncReport {
        groups: Vec::new(),
        dropped_minutes: 0,
        dropped_frames: 0,
    };
    let mut matched = 0;
    for (minute, frames) in by_minute(manifest) {
        let Some(&record) = records.get(&minute) else {
            log::debug!(
                "no scintillometer record for minute {}",
                format_timestamp(minute)
            );
            report.dropped_minutes += 1;
            report.dropped_frames += frames.len();
            continue;
        };
        matched += 1;
        let chunks = frames.chunks_exact(group_size);
        report.dropped_frames += chunks.remainder().len();
        report.groups.extend(chunks.map(|c| FrameGroup {
            minute_timestamp: minute,
            record: *record,
            frames: c.to_vec(),
        }));
    }
    if matched == 0 {
        return Err(Error::EmptyDataset(format!(
            "no minute of '{}' has a scintillometer record",
            manifest.dataset_id
        )));
    }
    if report.dropped_minutes > 0 {
        log::warn!(
            "{} minute(s) of '{}' have no scintillometer record and were dropped",
            report.dropped_minutes,
            manifest.dataset_id
        );
    }
    Ok(report)
}

/// Loads the frames of `entries` (in parallel), skipping unreadable ones.
fn load_frames(base: &Path, entries: &[FrameEntry]) -> Vec<crate::imaging::ImageFrame> {
    entries
        .par_iter()
        .filter_map(|e| {
            let path = resolve(base, &e.path);
            match load_frame(&path, e.timestamp_us) {
                Ok(f) => Some(match e.exposure_s {
                    Some(x) => f.with_exposure(x),
                    None => f,
                }),
                Err(err) => {
                    log::warn!("skipping frame: {err}");
                    None
                }
            }
        })
        .collect()
}

pub fn load_group(base: &Path, group: &FrameGroup, source_id: &str) -> Result<ImageSequence> {
    let frames = load_frames(base, &group.frames);
    ImageSequence::new(
        frames,
        format!("{source_id}@{}", format_timestamp(group.minute_timestamp)),
    )
}

/// Every minute of the manifest with at least two readable frames, in time
/// order. Scintillometer records are not consulted.
pub fn load_minutes(manifest: &DatasetManifest, base: &Path) -> Result<Vec<(i64, ImageSequence)>> {
    let mut out = Vec::new();
    for (minute, entries) in by_minute(manifest) {
        let frames = load_frames(base, &entries);
        if frames.len() < 2 {
            log::warn!(
                "minute {} has {} readable frame(s); excluded",
                format_timestamp(minute),
                frames.len()
            );
            continue;
        }
        let id = format!("{}@{}", manifest.dataset_id, format_timestamp(minute));
        out.push((minute, ImageSequence::new(frames, id)?));
    }
    Ok(out)
}

/// Reads a manifest and its scintillometer log and builds an evaluation
/// dataset with one sample per minute. Minutes with fewer than two readable
/// frames, or without a record, are left out.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let base = manifest_dir(manifest_path);
    let scint = load_scint_csv(&resolve(&base, &manifest.scint_log))?;
    let records: HashMap<i64, ScintRecord> =
        scint.iter().map(|r| (r.minute_timestamp, *r)).collect();
    let wanted = DatasetManifest {
        frames: manifest
            .frames
            .iter()
            .filter(|f| records.contains_key(&minute_of(f.timestamp_us)))
            .cloned()
            .collect(),
        ..manifest.clone()
    };
    let minutes: Vec<MinuteSample> = load_minutes(&wanted, &base)?
        .into_iter()
        .map(|(minute, sequence)| MinuteSample {
            minute_us: minute,
            truth: records[&minute].cn2,
            sequence,
        })
        .collect();
    if minutes.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "'{}' has no minute with both frames and a scintillometer record",
            manifest.dataset_id
        )));
    }
    Dataset::new(manifest.dataset_id, manifest.geometry, minutes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraGeometry;
    use crate::ingest::scint::MINUTE_US;

    fn manifest(counts: &[usize]) -> DatasetManifest {
        let mut frames = Vec::new();
        for (m, &n) in counts.iter().enumerate() {
            for i in 0..n {
                frames.push(FrameEntry {
                    path: format!("m{m}_{i}.png").into(),
                    timestamp_us: m as i64 * MINUTE_US + i as i64 * 1000,
                    exposure_s: None,
                });
            }
        }
        DatasetManifest {
            dataset_id: "t".into(),
            geometry: CameraGeometry::field_default(),
            frames,
            scint_log: "s.csv".into(),
            ground_truth: None,
            simulation: vec![],
        }
    }

    fn record(minute: i64, cn2: f64) -> ScintRecord {
        ScintRecord {
            minute_timestamp: minute * MINUTE_US,
            cn2_min: cn2,
            cn2_max: cn2,
            cn2,
            cn2_std: 0.0,
        }
    }

    #[test]
    fn full_minute_gives_forty_groups() {
        let r = synchronize(&manifest(&[120]), &[record(0, 1e-14)], 3).unwrap();
        assert_eq!(r.groups.len(), 40);
        assert_eq!(r.dropped_frames, 0);
    }

    #[test]
    fn remainder_dropped() {
        let r = synchronize(&manifest(&[7]), &[record(0, 1e-14)], 3).unwrap();
        assert_eq!(r.groups.len(), 2);
        assert_eq!(r.dropped_frames, 1);
        assert_eq!(r.groups[1].frames[0].path, Path::new("m0_3.png"));
    }

    #[test]
    fn minute_without_record_is_counted() {
        let r = synchronize(&manifest(&[6, 6]), &[record(1, 2e-14)], 3).unwrap();
        assert_eq!(r.dropped_minutes, 1);
        assert!(r
            .groups
            .iter()
            .all(|g| g.record.cn2 == 2e-14 && g.minute_timestamp == MINUTE_US));
    }

    #[test]
    fn no_overlap_is_empty_dataset() {
        let err = synchronize(&manifest(&[6]), &[record(5, 1e-14)], 3).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset(_)));
        assert!(matches!(
            synchronize(&manifest(&[6]), &[record(0, 1e-14)], 1),
            Err(Error::Config(_))
        ));
    }
}
