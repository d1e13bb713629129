//! Scalar abstraction for the numeric core.
//!
//! The geometry/attribute types, color conversion, voxelizer, and the
//! hierarchical transform are generic over [`Scalar`] so they run in `f32`
//! or `f64`. The codec pipeline itself is pinned to `f64` (see the `Real`
//! alias at the crate root): wire formats and model files store 64-bit
//! floats and the closed decoding loop must be bit-reproducible.

use num_traits::{Float, FromPrimitive, NumCast};

/// Floating point scalar usable by the numeric core.
pub trait Scalar:
    Float + FromPrimitive + NumCast + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    /// Lossless-enough conversion for metrics and wire code, which always
    /// compute in `f64`.
    fn to_f64_lossy(self) -> f64;

    /// Conversion from `f64` constants (color matrix entries, tolerances).
    fn from_f64_lossy(v: f64) -> Self;
}

impl Scalar for f32 {
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    fn to_f64_lossy(self) -> f64 {
        self
    }
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
}
