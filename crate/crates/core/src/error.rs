use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad magic {found:?}, expected \"CLD1\"")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("{path}: unsupported format version {found}, expected {expected}")]
    VersionMismatch {
        path: PathBuf,
        found: u16,
        expected: u16,
    },

    #[error("{path}: payload is {actual} bytes, expected {expected}")]
    LengthMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("{path}: manifest and header disagree on {field}: manifest {manifest}, header {header}")]
    DimensionMismatch {
        path: PathBuf,
        field: &'static str,
        manifest: String,
        header: String,
    },

    #[error("{path}: bad manifest: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("invalid dump: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Validation(Vec<crate::store::Violation>),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("beta must be finite and > 0, got {0}")]
    InvalidBeta(f64),

    #[error("length mismatch: {0} vs {1}")]
    ShapeMismatch(usize, usize),

    #[error("KL undefined: q[{index}] = 0 but p[{index}] = {p}")]
    SupportViolation { index: usize, p: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("layer {layer} out of range (dump has {layers})")]
    LayerOutOfRange { layer: usize, layers: usize },

    #[error("cumulant order {0} unsupported (valid: 1..=20)")]
    UnsupportedOrder(usize),

    #[error("moment of order {order} overflowed f64 range")]
    Range { order: usize },

    #[error("layer {layer}: entropy identity violated by {gap:e} nats")]
    Inconsistent { layer: usize, gap: f64 },

    #[error("too few samples: {have} < {need}")]
    TooFewSamples { have: usize, need: usize },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// File the error concerns, when there is one.
    pub fn path(&self) -> Option<&std::path::Path> {
        match self {
            Error::Io { path, .. }
            | Error::BadMagic { path, .. }
            | Error::VersionMismatch { path, .. }
            | Error::LengthMismatch { path, .. }
            | Error::DimensionMismatch { path, .. }
            | Error::Manifest { path, .. } => Some(path),
            _ => None,
        }
    }

    /// Short stable identifier, used by the CLI's machine-readable errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::BadMagic { .. } => "bad_magic",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::Manifest { .. } => "manifest",
            Error::Validation(_) => "validation",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidBeta(_) => "invalid_beta",
            Error::ShapeMismatch(..) => "shape_mismatch",
            Error::SupportViolation { .. } => "support_violation",
            Error::Empty(_) => "empty",
            Error::LayerOutOfRange { .. } => "layer_out_of_range",
            Error::UnsupportedOrder(_) => "unsupported_order",
            Error::Range { .. } => "range",
            Error::Inconsistent { .. } => "inconsistent",
            Error::TooFewSamples { .. } => "too_few_samples",
            Error::Invalid(_) => "invalid",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
