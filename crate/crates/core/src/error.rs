use std::io;

use thiserror::Error;

/// Coarse classification used by front-ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Contract,
    Numeric,
    Io,
}

#[derive(Debug, Error)]
pub enum LqfError {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value encountered in {0}")]
    NumericOverflow(String),

    #[error("singular system: estimated rank {rank} of {dim}")]
    Singular { rank: usize, dim: usize },

    #[error("matrix is not positive definite ({0})")]
    NotPositiveDefinite(String),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("refusing to materialize a {dim}x{dim} matrix (limit {limit})")]
    GuardExceeded { dim: usize, limit: usize },

    #[error("training diverged at step {step} (loss {loss:e})")]
    Divergence { step: usize, loss: f64 },

    #[error("curvature state is already frozen; factors are estimated exactly once")]
    AlreadyFrozen,

    #[error("curvature state has not been estimated yet")]
    NotFrozen,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("index {index} out of range (size {size})")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("malformed input at line {line}: {message}")]
    Malformed { line: usize, message: String },

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl LqfError {
    pub fn contract(msg: impl Into<String>) -> Self {
        LqfError::Contract(msg.into())
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            LqfError::NumericOverflow(_)
            | LqfError::Singular { .. }
            | LqfError::NotPositiveDefinite(_)
            | LqfError::Divergence { .. } => ErrorKind::Numeric,
            LqfError::Io(_) | LqfError::Format(_) | LqfError::Malformed { .. } => ErrorKind::Io,
            _ => ErrorKind::Contract,
        }
    }
}

pub type Result<T, E = LqfError> = std::result::Result<T, E>;

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(LqfError::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}

pub(crate) fn check_finite(context: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LqfError::NumericOverflow(context.to_string()))
    }
}
