use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum AdapterError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("digest mismatch for {path}: bundle says {expected}, content hashes to {actual}")]
    DigestMismatch {
        path: String,
        expected: String,
        actual: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Client(#[from] ci_client::ClientError),
}

impl AdapterError {
    pub fn code(&self) -> &str {
        match self {
            AdapterError::InvalidInput(_) => "invalid_input",
            AdapterError::DigestMismatch { .. } => "digest_mismatch",
            AdapterError::Io { .. } => "io_error",
            AdapterError::Client(e) => e.code(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| AdapterError::Io { path, source }
    }
}

pub type Result<T, E = AdapterError> = std::result::Result<T, E>;
