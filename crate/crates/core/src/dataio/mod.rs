//! Sequence loading, bit-exact raster formats, the synthetic scene
//! generator, and the sensor noise models.

mod manifest;
mod noise;
mod raster;
mod synth;

pub use manifest::{
    load_sequence, FrameEntry, GroundTruth, GtObjectFrame, SequenceManifest,
    read_camera_poses, read_object_poses, write_camera_poses, write_object_poses,
};
pub use noise::{
    apply_depth_noise, apply_flow_noise, apply_flow_outliers, sigma_for_target_epe, NoiseScope,
    NoiseSpec,
};
pub use raster::{DepthMap, FlowField, InstanceMask};
pub use synth::{
    generate_synthetic, write_sequence, ObjectScript, SyntheticSceneSpec, SyntheticSequence,
};

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: not an MBVO raster (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path}: expected {expected} channel(s), found {got}")]
    WrongChannels { path: PathBuf, expected: u32, got: u32 },
    #[error("{path}: raster is {got_w}x{got_h}, manifest says {want_w}x{want_h}")]
    DimensionMismatch { path: PathBuf, want_w: u32, want_h: u32, got_w: u32, got_h: u32 },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("invalid data: {0}")]
    Validation(String),
}

impl DataError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        DataError::Io { path: path.to_path_buf(), source }
    }
}
