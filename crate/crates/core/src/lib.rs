//! Multi-scale lidar–camera pyramid fusion for range-view 3D semantic
//! segmentation, with everything it needs built in: a small differentiable
//! tensor engine, spherical projection, camera-to-range-view feature mapping,
//! the fusion network, kNN label refinement, training and overlap evaluation.

pub mod blocks;
pub mod camproj;
pub mod cli;
pub mod dataio;
pub mod error;
pub mod numcore;
pub mod postprocess;
pub mod pyfu;
pub mod rangeview;
pub mod selftest;
pub mod traineval;

pub use error::{Error, Result};

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;
