use std::path::PathBuf;

/// Error type shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad argument shape, size or value.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Geometrically degenerate input (e.g. zero-length shoulder segment).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Non-finite values encountered where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Configuration or checkpoint validation failure.
    #[error("validation error: {0}")]
    Validation(String),

    /// Malformed on-disk data.
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    /// IO failure, annotated with the path that caused it.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
