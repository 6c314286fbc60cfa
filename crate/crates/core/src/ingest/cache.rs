use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::manifest::{manifest_dir, resolve, DatasetManifest, FrameEntry};
use super::raster::{load_frame, save_frame};
use crate::error::{Error, Result};
use crate::imaging::{crop, Roi};

/// Bumped whenever the cached file layout changes.
const CACHE_VERSION: u32 = 1;
const KEY_HEX: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedFrame {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheReport {
    pub cache_dir: PathBuf,
    pub manifest_path: PathBuf,
    pub manifest: DatasetManifest,
    pub written: usize,
    pub reused: usize,
    pub skipped: Vec<SkippedFrame>,
}

fn roi_bytes(roi: Roi) -> Vec<u8> {
    [roi.x0 as u64, roi.y0 as u64, roi.size as u64]
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect()
}

fn short_hex(digest: &[u8]) -> String {
    hex::encode(digest)[..KEY_HEX].to_string()
}

enum Outcome {
    Written(FrameEntry),
    Reused(FrameEntry),
    Skipped(SkippedFrame),
}

fn cache_one(base: &Path, dir: &Path, entry: &FrameEntry, roi: Roi) -> Outcome {
    let src = resolve(base, &entry.path);
    let skip = |reason: String| {
        Outcome::Skipped(SkippedFrame {
            path: entry.path.clone(),
            reason,
        })
    };
    let bytes = match std::fs::read(&src) {
        Ok(b) => b,
        Err(e) => return skip(e.to_string()),
    };
    let mut h = Sha256::new();
    h.update(CACHE_VERSION.to_le_bytes());
    h.update(roi_bytes(roi));
    h.update(&bytes);
    let name = PathBuf::from(format!("{}.png", short_hex(&h.finalize())));
    let cached = FrameEntry {
        path: name.clone(),
        ..entry.clone()
    };
    if dir.join(&name).is_file() {
        return Outcome::Reused(cached);
    }
    let frame = match load_frame(&src, entry.timestamp_us).and_then(|f| crop(&f, roi)) {
        Ok(f) => f,
        Err(e) => return skip(e.to_string()),
    };
    // Write under a temporary name first so an interrupted run never leaves
    // a truncated file under a valid key.
    let tmp = dir.join(format!("{}.tmp.png", name.display()));
    match save_frame(&frame, &tmp).and_then(|_| {
        std::fs::rename(&tmp, dir.join(&name)).map_err(|e| Error::io(dir.join(&name), e))
    }) {
        Ok(()) => Outcome::Written(cached),
        Err(e) => skip(e.to_string()),
    }
}

/// Crops every frame of a manifest to `roi` and stores the crops under
/// `cache_root`, keyed by the dataset id, the ROI and each file's content
/// hash. Files already present are reused, so a repeated call writes no
/// images. Unreadable frames are skipped and listed. A derived manifest
/// pointing at the crops is written into the cache directory.
pub fn cache_crops(manifest_path: &Path, roi: Roi, cache_root: &Path) -> Result<CacheReport> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let base = manifest_dir(manifest_path);

    let mut h = Sha256::new();
    h.update(CACHE_VERSION.to_le_bytes());
    h.update(manifest.dataset_id.as_bytes());
    h.update(roi_bytes(roi));
    let cache_dir = cache_root.join(format!(
        "{}-{}",
        manifest.dataset_id,
        short_hex(&h.finalize())
    ));
    std::fs::create_dir_all(&cache_dir).map_err(|e| Error::io(&cache_dir, e))?;

    let outcomes: Vec<Outcome> = manifest
        .frames
        .par_iter()
        .map(|e| cache_one(&base, &cache_dir, e, roi))
        .collect();
    let (mut written, mut reused) = (0, 0);
    let mut frames = Vec::new();
    let mut skipped = Vec::new();
    for o in outcomes {
        match o {
            Outcome::Written(f) => {
                written += 1;
                frames.push(f);
            }
            Outcome::Reused(f) => {
                reused += 1;
                frames.push(f);
            }
            Outcome::Skipped(s) => {
                log::warn!("frame {} not cached: {}", s.path.display(), s.reason);
                skipped.push(s);
            }
        }
    }

    let scint_log = resolve(&base, &manifest.scint_log);
    let scint_log = std::fs::canonicalize(&scint_log).unwrap_or(scint_log);
    let derived = DatasetManifest {
        frames,
        scint_log,
        ..manifest
    };
    let manifest_path = cache_dir.join("manifest.json");
    let unchanged = DatasetManifest::read(&manifest_path).is_ok_and(|m| m == derived);
    if !unchanged {
        derived.write(&manifest_path)?;
    }
    Ok(CacheReport {
        cache_dir,
        manifest_path,
        manifest: derived,
        written,
        reused,
        skipped,
    })
}
