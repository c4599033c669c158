use std::path::PathBuf;

use binsep_tensornn::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, BinsepError>;

#[derive(Error, Debug)]
pub enum BinsepError {
    #[error("input too short: {len} samples, need at least {needed}")]
    InputTooShort { len: usize, needed: usize },
    #[error("{what}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{what}: {msg}")]
    InvalidArgument { what: &'static str, msg: String },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("incompatible parameters: {}", .0.join(", "))]
    Incompatible(Vec<String>),
    #[error("data error in {path}: {msg}")]
    Data { path: PathBuf, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wav(#[from] hound::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("resampler: {0}")]
    Resample(String),
}

impl BinsepError {
    pub(crate) fn invalid(what: &'static str, msg: impl Into<String>) -> Self {
        BinsepError::InvalidArgument { what, msg: msg.into() }
    }

    pub(crate) fn shape(what: &'static str, expected: &[usize], got: &[usize]) -> Self {
        BinsepError::ShapeMismatch { what, expected: expected.to_vec(), got: got.to_vec() }
    }

    pub(crate) fn data(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        BinsepError::Data { path: path.into(), msg: msg.into() }
    }
}
