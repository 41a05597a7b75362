use std::path::PathBuf;

/// Crate-wide error type. CLI exit codes map onto the variants: data and
/// format problems are exit 2, numeric failures (NaN losses) exit 3.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed file contents (bad magic, wrong version, truncated payload).
    #[error("format error: {0}")]
    Format(String),

    /// Semantically invalid data or configuration.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite value where a finite one is required (NaN loss etc.).
    #[error("numeric failure: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
