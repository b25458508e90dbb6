//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input violated a documented precondition (shape, range, emptiness).
    #[error("domain error: {0}")]
    Domain(String),

    /// The transcript cannot be aligned to the available frames under CTC.
    #[error("alignment infeasible: target needs {needed} frames, input has {available}")]
    AlignmentInfeasible { needed: usize, available: usize },

    /// The operation needs a capability the model does not expose
    /// (e.g. input gradients on a black-box recognizer).
    #[error("capability error: {0}")]
    Capability(String),

    /// Not enough past audio to build the requested context window.
    #[error("insufficient context: need {needed_s:.3} s of audio before t, have {have_s:.3} s")]
    InsufficientContext { needed_s: f64, have_s: f64 },

    /// Configuration file / flag problems.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint parsing or version mismatch.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn capability(msg: impl Into<String>) -> Self {
        Error::Capability(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
