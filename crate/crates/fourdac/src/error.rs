//! Crate-wide error type.
//!
//! One enum covers the whole pipeline so the CLI can map every failure onto
//! a stable category name and exit code.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input cloud is empty or contains non-finite coordinates.
    #[error("degenerate cloud: {0}")]
    DegenerateCloud(String),

    /// Two frames that must share geometry do not.
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    /// Malformed input file (PLY, manifest, flow, config).
    #[error("parse error: {0}")]
    ParseError(String),

    /// A required PLY property is absent.
    #[error("missing property: {0}")]
    MissingProperty(String),

    /// Container sizes disagree (coefficients vs. tree, flow vs. frame, ...).
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A quantized value does not fit the signed 32-bit coefficient range.
    #[error("quantizer overflow: {0}")]
    Overflow(String),

    /// An operation needs trained models and none were supplied.
    #[error("model missing: {0}")]
    ModelMissing(String),

    /// A neighborhood query over an empty candidate set.
    #[error("empty neighborhood: {0}")]
    EmptyNeighborhood(String),

    /// Parallel input lists have different lengths.
    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    /// A symbol outside the coder's alphabet where no escape is available.
    #[error("symbol out of alphabet: {0}")]
    SymbolOutOfAlphabet(String),

    /// The coded payload ends before all symbols are decoded.
    #[error("truncated payload: {0}")]
    TruncatedPayload(String),

    /// A container does not start with the expected magic bytes.
    #[error("bad magic: {0}")]
    BadMagic(String),

    /// A container version this build does not understand.
    #[error("unsupported version: {0}")]
    UnsupportedVersion(String),

    /// Bitstream was produced with a different model than the one loaded.
    #[error("model mismatch: {0}")]
    ModelMismatch(String),

    /// A predicted frame arrived with no reference frame in the decoder state.
    #[error("missing reference: {0}")]
    MissingReference(String),

    /// Training produced a non-finite loss.
    #[error("divergence detected: {0}")]
    DivergenceDetected(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure for configs, manifests, reports.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-parsable category name, used by the CLI error line
    /// and mapped to exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::DegenerateCloud(_) => "DegenerateCloud",
            Error::GeometryMismatch(_) => "GeometryMismatch",
            Error::ParseError(_) => "ParseError",
            Error::MissingProperty(_) => "MissingProperty",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::Overflow(_) => "Overflow",
            Error::ModelMissing(_) => "ModelMissing",
            Error::EmptyNeighborhood(_) => "EmptyNeighborhood",
            Error::LengthMismatch(_) => "LengthMismatch",
            Error::SymbolOutOfAlphabet(_) => "SymbolOutOfAlphabet",
            Error::TruncatedPayload(_) => "TruncatedPayload",
            Error::BadMagic(_) => "BadMagic",
            Error::UnsupportedVersion(_) => "UnsupportedVersion",
            Error::ModelMismatch(_) => "ModelMismatch",
            Error::MissingReference(_) => "MissingReference",
            Error::DivergenceDetected(_) => "DivergenceDetected",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
