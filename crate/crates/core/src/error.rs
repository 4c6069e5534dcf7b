use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("{0}")]
    Data(String),
    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
