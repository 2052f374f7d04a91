use std::io;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("input mode mismatch: {0}")]
    Mode(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("training diverged at epoch {epoch}; last finite epoch: {last_finite:?}")]
    Diverged {
        epoch: usize,
        last_finite: Option<usize>,
    },
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("missing dataset split `{0}`")]
    MissingSplit(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
