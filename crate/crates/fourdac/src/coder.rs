//! Lossless entropy-coding backends and the frame bitstream container.
//!
//! Two backends share the module: a 32-bit carry-less range coder driven by
//! externally supplied distributions, and an adaptive Run-Length Golomb-Rice
//! coder for the self-contained baseline path. [`bitstream`] defines the wire
//! framing both travel in.

pub mod bits;
pub mod bitstream;
pub mod range;
pub mod rlgr;
