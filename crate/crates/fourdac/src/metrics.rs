//! Rate-distortion metrics.

use crate::error::{Error, Result};
use crate::frame::PointFrame;
use crate::scalar::Scalar;

/// Per-frame (or aggregate) rate-distortion numbers. The 24 bpp of raw
/// 8-bit RGB storage is the natural reference line for `bpp`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Metrics {
    pub bpp: f64,
    pub mse_y: f64,
    pub psnr_y: f64,
}

/// PSNR saturates at 100 dB; below this mean squared error the measurement
/// is noise and capping keeps near-lossless runs comparable.
const MSE_CAP: f64 = 255.0 * 255.0 * 1e-10;

/// Luma PSNR against an 8-bit peak, capped at 100 dB.
pub fn psnr_y_from_mse(mse_y: f64) -> f64 {
    if mse_y < MSE_CAP {
        100.0
    } else {
        10.0 * (255.0 * 255.0 / mse_y).log10()
    }
}

/// Compare a decoded frame against the original it was coded from.
/// `total_bits` is the size of the coded frame record; `bpp` is exactly
/// `total_bits / point_count`.
pub fn compute_metrics<T: Scalar>(
    original: &PointFrame<T>,
    decoded: &PointFrame<T>,
    total_bits: u64,
) -> Result<Metrics> {
    if original.positions != decoded.positions || original.depth != decoded.depth {
        return Err(Error::GeometryMismatch(
            "metrics require identical geometry".into(),
        ));
    }
    let n = original.len() as f64;
    let mut se = 0.0;
    for (a, b) in original.attributes.iter().zip(&decoded.attributes) {
        let d = a[0].to_f64_lossy() - b[0].to_f64_lossy();
        se += d * d;
    }
    let mse_y = se / n;
    Ok(Metrics {
        bpp: total_bits as f64 / n,
        mse_y,
        psnr_y: psnr_y_from_mse(mse_y),
    })
}
