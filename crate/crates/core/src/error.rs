//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("class {class} is not in the class set of domain {domain}")]
    InvalidClass { class: u32, domain: u32 },

    #[error("empty batch in {0}")]
    EmptyBatch(&'static str),

    #[error("non-finite value in {component} at step {step}")]
    NonFinite { component: String, step: usize },

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("query mask access during support-only fine-tuning")]
    QueryMaskAccess,

    #[error("self-check failed: {0}")]
    CheckFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
