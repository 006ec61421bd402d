#[derive(Debug, thiserror::Error)]
pub enum ProviderError {
    #[error("could not start worker: {0}")]
    SpawnFailure(String),
    #[error("invalid provider configuration: {0}")]
    InvalidTemplate(String),
    #[error("submit command failed: {0}")]
    SubmitFailure(String),
    #[error("cannot parse job id from scheduler output `{0}`")]
    ParseFailure(String),
    #[error("scheduler command failed: {0}")]
    CommandFailure(String),
    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error("unrecognized job state `{0}`")]
    UnknownState(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ProviderError {
    pub fn code(&self) -> &'static str {
        match self {
            ProviderError::SpawnFailure(_) => "spawn_failure",
            ProviderError::InvalidTemplate(_) => "invalid_template",
            ProviderError::SubmitFailure(_) => "submit_failure",
            ProviderError::ParseFailure(_) => "parse_failure",
            ProviderError::CommandFailure(_) => "command_failure",
            ProviderError::UnknownJob(_) => "unknown_job",
            ProviderError::UnknownState(_) => "unknown_state",
            ProviderError::Io(_) => "io_error",
        }
    }
}

pub type Result<T, E = ProviderError> = std::result::Result<T, E>;
