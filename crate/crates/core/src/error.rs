use numkit::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("dataset line {line}: {message}")]
    Record { line: usize, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("in-sample seasonal naive error is zero")]
    LowVariability,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
