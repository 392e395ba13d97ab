use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("reference vector norm {norm:e} is below the floor {floor:e}")]
    DegenerateReference { norm: f64, floor: f64 },

    #[error("division by zero: {0}")]
    DivisionByZero(&'static str),

    #[error("conversion from the denoised prediction is not supported for `{0}`")]
    UnsupportedKind(&'static str),

    #[error("unknown prediction kind `{0}`")]
    UnknownKind(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("class index {index} out of range for a mixture with {components} components")]
    ClassIndex { index: usize, components: usize },

    #[error("non-finite sampler state at step {step} (sigma = {sigma})")]
    NonFiniteState { step: usize, sigma: f64 },

    #[error("degenerate bandwidth: all values are identical, pass an explicit bandwidth")]
    DegenerateBandwidth,

    #[error("invalid config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("failed to decode image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
