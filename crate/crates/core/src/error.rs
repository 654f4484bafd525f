use std::io;

use thiserror::Error;

/// Errors raised anywhere in the detector pipeline.
#[derive(Debug, Error)]
pub enum HvcmError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error("label {label} at row {row} outside [-1, {c_max})")]
    LabelOutOfRange { row: usize, label: i32, c_max: u32 },

    #[error("non-finite value in row {0}")]
    NonFinite(usize),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("class {class} is degenerate: {reason}")]
    DegenerateFit { class: usize, reason: String },

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: u64, loss: f64 },
}

impl HvcmError {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        HvcmError::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = HvcmError> = std::result::Result<T, E>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(HvcmError::DimensionMismatch { expected, got })
    }
}
