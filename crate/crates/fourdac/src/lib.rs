//! Dynamic point cloud attribute compression.
//!
//! The codec predicts each frame's attributes from the previously decoded
//! frame via explicit 3D motion estimation and compensation, transforms the
//! prediction residual with a region-adaptive hierarchical transform, and
//! entropy-codes the quantized coefficients under a learned temporal
//! conditional probability model. Every prediction input is available to
//! the decoder (previous reconstruction plus current geometry), so the loop
//! is closed and drift-free by construction. Static baselines (direct
//! transform coding with adaptive run-length Golomb-Rice, and
//! nearest-neighbor prediction without learned models) share the same
//! bitstream container.
//!
//! Geometry is assumed transmitted out-of-band; this crate codes attributes
//! only.

pub mod codec;
pub mod coder;
pub mod color;
pub mod context;
pub mod error;
pub mod frame;
pub mod knn;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod nnet;
pub mod ply;
pub mod raht;
pub mod report;
pub mod scalar;
pub mod synth;

pub use error::{Error, Result};
pub use frame::{morton_code, voxelize, PointFrame, RawPointCloud, MAX_DEPTH};
pub use metrics::{compute_metrics, Metrics};
pub use scalar::Scalar;

/// Scalar type the codec pipeline is pinned to.
pub type Real = f64;

/// Voxelized frame at pipeline precision.
pub type Frame = frame::PointFrame<Real>;

/// Ingest cloud at pipeline precision.
pub type Cloud = frame::RawPointCloud<Real>;
