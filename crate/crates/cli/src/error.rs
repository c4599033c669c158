use binsep::BinsepError;
use binsep_tensornn::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

/// Failure classes, each with its own process exit code.
#[derive(Error, Debug)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }
}

impl From<BinsepError> for CliError {
    fn from(e: BinsepError) -> Self {
        let msg = e.to_string();
        match e {
            BinsepError::NonFinite(_) | BinsepError::Tensor(TensorError::NonFinite { .. }) => CliError::Numeric(msg),
            BinsepError::InvalidArgument { .. } | BinsepError::ShapeMismatch { .. } | BinsepError::Incompatible(_) => {
                CliError::Config(msg)
            }
            BinsepError::Tensor(TensorError::Incompatible(_)) => CliError::Config(msg),
            _ => CliError::Data(msg),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        BinsepError::from(e).into()
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<png::EncodingError> for CliError {
    fn from(e: png::EncodingError) -> Self {
        CliError::Data(e.to_string())
    }
}
