//! Multi-sensor 3D semantic occupancy at desk scale: a deterministic
//! synthetic sensor rig (surround cameras, lidar, radar), per-modality
//! feature branches, squeeze-excitation dynamic fusion, a coarse-to-fine
//! decoder with multi-scale supervision, and the full evaluation protocol
//! (per-class IoU, mIoU, scene completion, radius- and scenario-sliced
//! scoring).
//!
//! Everything numeric is generic over the [`scalar::Scalar`] float type;
//! `f32` is the training default and `f64` backs gradient verification.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod grid;
pub mod params;
pub mod scalar;
pub mod sim;
pub mod tensor;

pub use error::{Error, Result};

/// Concrete aliases for the two supported scalar widths.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type GridSpec32 = grid::GridSpec<f32>;
pub type GridSpec64 = grid::GridSpec<f64>;
