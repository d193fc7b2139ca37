use std::fmt;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or layer shapes do not line up.
    #[error("dimension mismatch: {0}")]
    Dim(String),
    /// A caller violated an API precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Input data is structurally valid but unusable (empty corpus, zero batch, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// A NaN or infinity reached a place that requires finite values.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// A text record failed to parse; `line` is 1-based within the file.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    /// Referential-integrity violation between ingested tables.
    #[error("integrity error: {0}")]
    Integrity(String),
    /// A metric is undefined on the given data (e.g. single-class AUC).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    /// Checkpoint file is malformed or does not match the model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(msg: impl fmt::Display) -> Self {
        Error::Dim(msg.to_string())
    }
    pub fn contract(msg: impl fmt::Display) -> Self {
        Error::Contract(msg.to_string())
    }
    pub fn invalid(msg: impl fmt::Display) -> Self {
        Error::InvalidInput(msg.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
