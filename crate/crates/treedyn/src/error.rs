//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("graph construction failed: {0}")]
    Construction(String),

    #[error("invalid planning query: {0}")]
    Query(String),

    /// The movement mask selects nothing, so masked costs (means over
    /// selected particles) are undefined.
    #[error("degenerate query: {0}")]
    DegenerateQuery(String),

    #[error("numerical instability: {0}")]
    Numeric(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("planning failed: {0}")]
    Planning(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}
