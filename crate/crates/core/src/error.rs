//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Input rejected before any work was done.
    #[error("validation: {0}")]
    Validation(String),

    /// Route planning could not connect start to goal.
    #[error("planning: {0}")]
    Planning(String),

    /// Malformed map, config, checkpoint or dataset content.
    #[error("parse ({what}): {msg}")]
    Parse { what: String, msg: String },

    /// A pipeline stage was invoked before its prerequisite artifact exists.
    #[error("missing artifact: {artifact}; run `{stage}` first")]
    MissingArtifact { artifact: String, stage: String },

    /// Training diverged (non-finite loss).
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CoreError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CoreError::Validation(msg.into())
    }

    pub fn parse(what: impl Into<String>, msg: impl Into<String>) -> Self {
        CoreError::Parse { what: what.into(), msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
