//! Weight files: one UTF-8 JSON header line, then every parameter as
//! little-endian `f32` in declaration order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::baseline::baseline_layout;
use super::physics::physics_layout;
use super::{
    AnyModel, BaselineCnn, BaselineConfig, LossDomain, Model, ModelKind, PhysicsConfig,
    PhysicsGradNet,
};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const WEIGHT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightHeader {
    pub format_version: u32,
    pub model_kind: ModelKind,
    pub n_input_frames: usize,
    pub loss_domain: LossDomain,
    pub layers: Vec<LayerEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub physics: Option<PhysicsConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineConfig>,
}

fn header_for(model: &AnyModel) -> WeightHeader {
    let (physics, baseline) = match model {
        AnyModel::Physics(m) => (Some(m.config().clone()), None),
        AnyModel::Baseline(m) => (None, Some(m.config().clone())),
    };
    WeightHeader {
        format_version: WEIGHT_FORMAT_VERSION,
        model_kind: model.kind(),
        n_input_frames: model.n_input_frames(),
        loss_domain: model.loss_domain(),
        layers: model
            .layout()
            .into_iter()
            .map(|(name, shape)| LayerEntry { name, shape })
            .collect(),
        physics,
        baseline,
    }
}

pub fn save_weights(model: &AnyModel, path: &Path) -> Result<()> {
    let mut buf = serde_json::to_vec(&header_for(model))?;
    buf.push(b'\n');
    for p in model.params() {
        for &v in p.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<AnyModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_weights(&bytes)
}

pub(crate) fn parse_weights(bytes: &[u8]) -> Result<AnyModel> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::WeightLoad("missing header line".into()))?;
    let header: WeightHeader = serde_json::from_slice(&bytes[..split])
        .map_err(|e| Error::WeightLoad(format!("bad header: {e}")))?;
    if header.format_version != WEIGHT_FORMAT_VERSION {
        return Err(Error::WeightLoad(format!(
            "format version {} not supported (expected {WEIGHT_FORMAT_VERSION})",
            header.format_version
        )));
    }

    let expected = match header.model_kind {
        ModelKind::Physics => {
            let cfg = header
                .physics
                .as_ref()
                .ok_or_else(|| Error::WeightLoad("physics header lacks its config".into()))?;
            if cfg.n_input_frames != header.n_input_frames {
                return Err(Error::WeightLoad(format!(
                    "n_input_frames {} in header but {} in model config",
                    header.n_input_frames, cfg.n_input_frames
                )));
            }
            physics_layout(cfg)
        }
        ModelKind::Baseline => {
            let cfg = header
                .baseline
                .as_ref()
                .ok_or_else(|| Error::WeightLoad("baseline header lacks its config".into()))?;
            if header.n_input_frames != super::BASELINE_FRAMES {
                return Err(Error::WeightLoad(format!(
                    "baseline takes {} frames, header says {}",
                    super::BASELINE_FRAMES,
                    header.n_input_frames
                )));
            }
            baseline_layout(cfg)
        }
    };
    if expected.len() != header.layers.len() {
        return Err(Error::WeightLoad(format!(
            "expected {} layers, found {}",
            expected.len(),
            header.layers.len()
        )));
    }
    for ((name, shape), found) in expected.iter().zip(&header.layers) {
        if *name != found.name || *shape != found.shape {
            return Err(Error::WeightLoad(format!(
                "layer mismatch: expected {name} {shape:?}, found {} {:?}",
                found.name, found.shape
            )));
        }
    }

    let mut blob = &bytes[split + 1..];
    let mut params = Vec::with_capacity(expected.len());
    for (name, shape) in expected {
        let n: usize = shape.iter().product();
        if blob.len() < 4 * n {
            return Err(Error::WeightLoad(format!(
                "file truncated inside {name}: need {} bytes, {} left",
                4 * n,
                blob.len()
            )));
        }
        let (head, rest) = blob.split_at(4 * n);
        let data = head
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        params.push(Tensor::new(shape, data)?);
        blob = rest;
    }
    if !blob.is_empty() {
        return Err(Error::WeightLoad(format!("{} trailing bytes", blob.len())));
    }
    if params.iter().any(|p| !p.all_finite()) {
        return Err(Error::WeightLoad("non-finite weight".into()));
    }

    Ok(match header.model_kind {
        ModelKind::Physics => AnyModel::Physics(PhysicsGradNet::from_parts(
            header.physics.expect("checked above"),
            header.loss_domain,
            params,
        )?),
        ModelKind::Baseline => AnyModel::Baseline(BaselineCnn::from_parts(
            header.baseline.expect("checked above"),
            header.loss_domain,
            params,
        )?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoded(model: &AnyModel) -> Vec<u8> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.weights");
        save_weights(model, &path).unwrap();
        std::fs::read(&path).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        for model in [
            AnyModel::Physics(PhysicsGradNet::new(PhysicsConfig::default(), 4).unwrap()),
            AnyModel::Baseline(BaselineCnn::new(BaselineConfig::default(), 4).unwrap()),
        ] {
            let back = parse_weights(&encoded(&model)).unwrap();
            assert_eq!(back.params(), model.params());
            assert_eq!(back.kind(), model.kind());
        }
    }

    #[test]
    fn truncated_file_fails() {
        let model = AnyModel::Physics(PhysicsGradNet::new(PhysicsConfig::default(), 4).unwrap());
        let bytes = encoded(&model);
        let err = parse_weights(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::WeightLoad(_)));
    }

    #[test]
    fn frame_count_mismatch_fails() {
        let model = AnyModel::Physics(PhysicsGradNet::new(PhysicsConfig::default(), 4).unwrap());
        let bytes = encoded(&model);
        let text =
            String::from_utf8_lossy(&bytes[..bytes.iter().position(|&b| b == b'\n').unwrap()])
                .to_string();
        let mut header: WeightHeader = serde_json::from_str(&text).unwrap();
        header.physics.as_mut().unwrap().n_input_frames = 5;
        header.n_input_frames = 5;
        let mut tampered = serde_json::to_vec(&header).unwrap();
        tampered.extend_from_slice(&bytes[text.len()..]);
        let err = parse_weights(&tampered).unwrap_err().to_string();
        assert!(err.contains("expected front.weight [3, 5, 5, 5]"), "{err}");
    }
}
