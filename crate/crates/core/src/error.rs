use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("input is digitally silent; loudness normalization is impossible")]
    Silent,

    #[error("teacher has {teacher} frames but the codec produced {codec}; tolerance is 2")]
    Alignment { teacher: usize, codec: usize },

    #[error("out of range: {0}")]
    Range(String),

    #[error("bitstream length error: {0}")]
    Length(String),

    #[error("bitstream corrupt: {0}")]
    Corrupt(String),

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("non-finite {term} at iteration {iteration}")]
    NonFinite { term: String, iteration: u64 },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<Path>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.as_ref().to_path_buf();
        move |source| Error::Io { path, source }
    }

    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Error {
        Error::Config { key: key.into(), msg: msg.into() }
    }

    /// Process exit code: 3 for runtime/numeric failures, 2 for everything
    /// attributable to the caller's input.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } | Error::Tensor(_) => 3,
            _ => 2,
        }
    }
}
