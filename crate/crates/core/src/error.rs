use thiserror::Error;

/// Errors produced by the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("ordering violation: {0}")]
    Ordering(String),

    #[error("out of bounds: {0}")]
    Bounds(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("load error: {0}")]
    Load(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
