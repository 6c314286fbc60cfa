//! Dataset loading: frame manifests, scintillometer logs, minute pairing and
//! ROI-crop caching.

mod cache;
mod convert;
mod manifest;
mod raster;
mod scint;
mod sync;

pub use cache::{cache_crops, CacheReport, SkippedFrame};
pub use convert::{convert, ConvertOptions, ConvertReport, ScintColumns};
pub use manifest::{manifest_dir, resolve, DatasetManifest, FrameEntry, GroundTruthSource};
pub use raster::{load_frame, save_frame};
pub use scint::{
    format_timestamp, load_scint_csv, minute_of, parse_scint_csv, parse_timestamp, write_scint_csv,
    ScintRecord, MINUTE_US,
};
pub use sync::{
    load_dataset, load_group, load_minutes, synchronize, FrameGroup, SyncReport, DEFAULT_GROUP_SIZE,
};
