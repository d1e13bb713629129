//! Evaluation reports: per-frame rate, quality and timing rolled up into a
//! schema-versioned document that serializes to JSON.
//!
//! Timing fields are wall-clock milliseconds measured by whoever ran the
//! codec; an offline evaluation that never touched the coder leaves them at
//! zero rather than inventing numbers.

use serde::{Deserialize, Serialize};

use crate::codec::CodecConfig;

/// Bumped whenever the report layout changes shape.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Rate, quality and timing for a single frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub frame_index: u32,
    /// Compressed bits per occupied voxel.
    pub bpp: f64,
    /// Luma PSNR in dB, capped at 100.
    pub psnr_y: f64,
    pub encode_ms: f64,
    pub decode_ms: f64,
}

/// A whole-sequence evaluation: frame rows plus unweighted means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    /// Codec settings the frames were produced under.
    pub config: CodecConfig,
    /// Content hash of the entropy model as 16 hex digits; all zeros means
    /// the stream was coded without one.
    pub model_hash: String,
    pub frames: Vec<FrameReport>,
    pub mean_bpp: f64,
    pub mean_psnr_y: f64,
    pub mean_encode_ms: f64,
    pub mean_decode_ms: f64,
}

impl Report {
    /// Rolls frame rows up into a report; means over an empty row set are
    /// zero rather than NaN so the JSON stays comparable.
    pub fn new(config: CodecConfig, model_hash: u64, frames: Vec<FrameReport>) -> Report {
        let n = frames.len() as f64;
        let mean = |f: fn(&FrameReport) -> f64| {
            if frames.is_empty() {
                0.0
            } else {
                frames.iter().map(f).sum::<f64>() / n
            }
        };
        Report {
            schema_version: REPORT_SCHEMA_VERSION,
            config,
            model_hash: format!("{model_hash:016x}"),
            mean_bpp: mean(|r| r.bpp),
            mean_psnr_y: mean(|r| r.psnr_y),
            mean_encode_ms: mean(|r| r.encode_ms),
            mean_decode_ms: mean(|r| r.decode_ms),
            frames,
        }
    }
}
