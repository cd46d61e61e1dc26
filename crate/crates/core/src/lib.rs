//! Multi-body visual odometry: joint estimation of camera and per-object
//! SE(3) motion from depth, dense optical flow, and instance masks.
//!
//! The crate is organized around the processing order of a frame pair:
//!
//! - [`geometry`]: pinhole camera, SE(3)/se(3), point motion prediction.
//! - [`estimator`]: robust nonlinear least squares for camera and object
//!   motion, including the joint motion + optical-flow refinement.
//! - [`dynamics`]: scene flow, dynamic/static classification, and tracking
//!   label propagation across frames.
//! - [`pipeline`]: per-frame orchestration of sampling, initialization,
//!   estimation, and track bookkeeping.
//! - [`dataio`]: sequence manifests, raster file formats, the synthetic
//!   scene generator, and the sensor noise models.
//! - [`eval`]: pose/velocity/flow error metrics and report assembly.

pub mod dataio;
pub mod dynamics;
pub mod estimator;
pub mod eval;
pub mod geometry;
pub mod pipeline;
