//! Polar bird's-eye-view LiDAR detection: voxelization, representative-row
//! attention, geometry-aware window attention, a CenterPoint-style head,
//! synthetic scenes, streaming simulation and evaluation.

pub mod blocks;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod ga;
pub mod geometry;
pub mod grr;
pub mod head;
pub mod kernels;
pub mod model;
pub mod resolution;
pub mod streaming;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod view;
pub mod voxelize;
pub mod weights;
pub mod window;

pub use error::{Error, Result};
pub use tensor::Tensor;
