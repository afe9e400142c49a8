//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// User-supplied data does not match the expected dimensions.
    #[error("input error: {0}")]
    Input(String),

    /// A vector with zero norm was passed where a direction is required.
    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    /// Reduction requested over an axis of length zero.
    #[error("empty axis: {0}")]
    EmptyAxis(String),

    /// A dataset record failed to parse.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Records disagree with the dataset manifest.
    #[error("schema error: {0}")]
    Schema(String),

    /// Numerical failure: non-finite loss, failed gradient check, etc.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 for data problems, 3 for numeric ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}
