//! Crate-wide error type.
//!
//! Variants map onto the CLI exit-code contract: usage errors exit 1,
//! data/format errors exit 2, numeric failures exit 3.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A text record could not be parsed.
    #[error("{path}:{line}: parse error: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// An edge or record references an id that does not exist.
    #[error("referential integrity: {0}")]
    Integrity(String),

    /// A binary or structured file does not match its declared layout.
    #[error("format error: {0}")]
    Format(String),

    /// Values are structurally valid but semantically unusable
    /// (non-finite embeddings, zero rows under normalization, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Tensor or vector shapes are incompatible.
    #[error("shape error: {0}")]
    Shape(String),

    /// A caller-supplied argument is out of contract.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Numeric failure: divergence, NaN loss, non-convergence.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Model or run configuration is inconsistent.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit code for the CLI contract: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) | Error::Config(_) => 1,
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
