use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LeafError>;

#[derive(Debug, Error)]
pub enum LeafError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric abort at epoch {epoch} step {step}: {detail}")]
    NumericAbort {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LeafError {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        LeafError::Param(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        LeafError::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        LeafError::Config(msg.into())
    }
}
