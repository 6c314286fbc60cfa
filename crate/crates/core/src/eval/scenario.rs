use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::protocol::{Dataset, MinuteSample};
use crate::error::{Error, Result};
use crate::geometry::CameraGeometry;
use crate::turbsim::{simulate_sequence, Scene, SimConfig};

const MINUTE_US: i64 = 60_000_000;

/// One simulated "minute": a clean scene and the turbulence applied to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneCase {
    pub scene: Scene,
    pub scene_seed: u64,
    pub config: SimConfig,
}

/// Renders and simulates every case at `size` x `size`. Case `i` becomes
/// minute `i`, with the commanded Cn2 as truth. All cases must share `geom`.
pub fn simulated_dataset(
    id: impl Into<String>,
    size: usize,
    geom: CameraGeometry,
    cases: &[SceneCase],
) -> Result<Dataset> {
    if cases.is_empty() {
        return Err(Error::EmptyInput("no scene cases".into()));
    }
    if let Some(c) = cases.iter().find(|c| c.config.geom != geom) {
        return Err(Error::Validation(format!(
            "case seeded {} uses a different geometry",
            c.config.seed
        )));
    }
    let minutes = cases
        .par_iter()
        .enumerate()
        .map(|(i, case)| {
            let minute_us = i as i64 * MINUTE_US;
            let clean = case.scene.render(size, size, case.scene_seed);
            let cfg = SimConfig {
                start_timestamp_us: minute_us,
                ..case.config
            };
            let (sequence, truth) = simulate_sequence(&clean, &cfg)?;
            Ok(MinuteSample {
                minute_us,
                truth,
                sequence,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(id, geom, minutes)
}
