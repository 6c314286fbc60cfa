use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CameraGeometry;
use crate::turbsim::SimConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    /// Relative paths are resolved against the manifest's directory.
    pub path: PathBuf,
    pub timestamp_us: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exposure_s: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundTruthSource {
    Scintillometer,
    Simulator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub geometry: CameraGeometry,
    pub frames: Vec<FrameEntry>,
    /// Per-minute truth in the scintillometer CSV layout.
    pub scint_log: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruthSource>,
    /// Simulator settings of each minute, for simulated datasets.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub simulation: Vec<SimConfig>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.dataset_id.trim().is_empty() {
            return Err(Error::Validation("manifest dataset_id is empty".into()));
        }
        if let Some(w) = self
            .frames
            .windows(2)
            .find(|w| w[1].timestamp_us < w[0].timestamp_us)
        {
            return Err(Error::Validation(format!(
                "frame timestamps not sorted: {} before {}",
                w[0].path.display(),
                w[1].path.display()
            )));
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Self = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Sorts frames by timestamp (stable, so ties keep their order).
    pub fn sort_frames(&mut self) {
        self.frames.sort_by_key(|f| f.timestamp_us);
    }
}

/// Directory that relative manifest paths are resolved against.
pub fn manifest_dir(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

pub fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}
