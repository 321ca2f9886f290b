//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by model construction, estimation and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid user input (bad values, empty data, malformed requests).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Shapes of two arguments do not line up.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Parameters outside their admissible domain (non-positive scales, ...).
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),

    /// A quantity was requested outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// An iterative numerical procedure failed to converge or blew up.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Underlying file-system error.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A structured text file could not be parsed; names file, line and field.
    #[error("parse error in {path} (line {line}, {field}): {message}")]
    Parse {
        path: String,
        line: usize,
        field: String,
        message: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
