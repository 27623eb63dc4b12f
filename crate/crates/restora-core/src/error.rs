//! Crate-wide error type with a coarse category used for CLI exit codes.

use thiserror::Error;

/// Coarse classification, stable contract for scripting (exit codes).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Bad arguments, config keys, or parameter ranges (exit 1).
    Usage,
    /// Malformed or inconsistent input data (exit 2).
    Data,
    /// Numerical failure: degenerate statistics, non-finite values (exit 3).
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported magic number {found:?} (expected P5 or P6)")]
    PpmUnsupportedMagic { found: String },

    #[error("malformed PPM header: {reason}")]
    PpmMalformedHeader { reason: String },

    #[error("truncated PPM payload: expected {expected} bytes, got {got}")]
    PpmTruncatedPayload { expected: usize, got: usize },

    #[error("malformed binary {what}: {reason}")]
    MalformedBinary { what: &'static str, reason: String },

    #[error("expected {expected} colorspace, got {got}")]
    ColorspaceMismatch { expected: String, got: String },

    #[error("dimension mismatch: {context} ({a} vs {b})")]
    DimensionMismatch {
        context: String,
        a: String,
        b: String,
    },

    #[error("image {h}x{w} smaller than required {min}x{min}")]
    ImageTooSmall { h: usize, w: usize, min: usize },

    #[error("invalid parameter {name}={value}: {reason}")]
    InvalidParam {
        name: &'static str,
        value: String,
        reason: &'static str,
    },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("timestep {t} out of range [{lo}, {hi}]")]
    StepOutOfRange { t: usize, lo: usize, hi: usize },

    #[error("mixture fitting failed: {0}")]
    MixtureFit(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("file pairing error: {0}")]
    Pairing(String),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidParam { .. } | Error::Config(_) => ErrorCategory::Usage,
            Error::Io { .. }
            | Error::PpmUnsupportedMagic { .. }
            | Error::PpmMalformedHeader { .. }
            | Error::PpmTruncatedPayload { .. }
            | Error::MalformedBinary { .. }
            | Error::ColorspaceMismatch { .. }
            | Error::DimensionMismatch { .. }
            | Error::ImageTooSmall { .. }
            | Error::Pairing(_) => ErrorCategory::Data,
            Error::DegenerateInput(_) | Error::StepOutOfRange { .. } | Error::MixtureFit(_) => {
                ErrorCategory::Numerical
            }
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
