use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("value out of domain: {0}")]
    Domain(String),
    #[error("non-finite parameter logits: {0}")]
    Parameter(String),
    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(String),
    #[error("degenerate density: {0}")]
    DegenerateDensity(String),
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("empty input: {0}")]
    Empty(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("target evaluation failed: {0}")]
    Target(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, FlowError>;
