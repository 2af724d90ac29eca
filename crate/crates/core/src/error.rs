//! Shared error type for the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch in {context}: {detail}")]
    ShapeMismatch { context: String, detail: String },

    #[error("non-finite value in {context}{}", diag.as_ref().map(|d| format!(" ({d})")).unwrap_or_default())]
    NonFinite { context: String, diag: Option<String> },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("value out of range in {context}: {detail}")]
    OutOfRange { context: String, detail: String },

    #[error("training diverged at step {step}: loss {loss:.3e} (t drawn: {t})")]
    Diverged { step: usize, loss: f64, t: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    pub fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        CoreError::ShapeMismatch { context: context.into(), detail: detail.into() }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        CoreError::NonFinite { context: context.into(), diag: None }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
