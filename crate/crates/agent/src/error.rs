use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("no local account mapped for `{0}`")]
    UnmappedIdentity(String),
    #[error("cannot create workspace {path}: {message}")]
    WorkspaceCreation { path: PathBuf, message: String },
    #[error("clone failed: {0}")]
    CloneFailure(String),
    #[error("broker rejected the agent key; check agent_key_file or AGENT_KEY")]
    InvalidAgentKey,
    #[error(transparent)]
    Provider(#[from] ci_providers::ProviderError),
    #[error(transparent)]
    Client(#[from] ci_client::ClientError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl AgentError {
    pub fn config(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        AgentError::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            AgentError::Config { .. } => "config_error",
            AgentError::UnmappedIdentity(_) => "unmapped_identity",
            AgentError::WorkspaceCreation { .. } => "workspace_creation_failure",
            AgentError::CloneFailure(_) => "clone_failure",
            AgentError::InvalidAgentKey => "invalid_agent_key",
            AgentError::Provider(e) => e.code(),
            AgentError::Client(_) => "broker_error",
            AgentError::Io(_) => "io_error",
        }
    }
}

pub type Result<T, E = AgentError> = std::result::Result<T, E>;
