use thiserror::Error;

use crate::numerics::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config: {0}")]
    Config(String),
    #[error("validation: {0}")]
    Validation(String),
    #[error("data: {0}")]
    Data(String),
    #[error("label: {0}")]
    Label(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("non-finite loss at iteration {iteration}: first bad term is {term}")]
    NonFinite { iteration: usize, term: &'static str },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self::Data(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Self::Validation(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Self::Format {
            offset,
            msg: msg.into(),
        }
    }
}
