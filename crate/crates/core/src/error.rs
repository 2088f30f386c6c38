//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or axis mismatch in a tensor operation. The message names the op
    /// and the offending dimensions.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration (bad operator name, inconsistent dims, bad CLI value).
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// Malformed genotype or genotype/space mismatch.
    #[error("genotype error: {0}")]
    Genotype(String),

    /// Checkpoint container problems (missing tensor, shape mismatch, bad header).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Non-finite values encountered during optimization.
    #[error("numerical divergence at epoch {epoch} step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            Error::Diverged { .. } => 3,
            _ => 1,
        }
    }
}
