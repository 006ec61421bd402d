use axum::http::StatusCode;
use ci_protocol::{ArtifactBundle, RunState, SchemaError};

#[derive(Debug, thiserror::Error)]
pub enum BrokerError {
    #[error("authentication failed")]
    AuthFailure,
    #[error("missing, unknown or expired bearer token")]
    InvalidToken,
    #[error("agent key does not match the endpoint")]
    InvalidAgentKey,
    #[error("invalid endpoint descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("function payload is empty")]
    EmptyPayload,
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error("invalid result report: {0}")]
    InvalidReport(String),
    #[error("malformed request: {0}")]
    Schema(#[from] SchemaError),
    #[error("unknown endpoint {0}")]
    UnknownEndpoint(String),
    #[error("unknown function {0}")]
    UnknownFunction(String),
    #[error("unknown run {0}")]
    UnknownRun(String),
    #[error("unknown artifact {0}")]
    UnknownArtifact(String),
    #[error("function is not on the endpoint's allow-list")]
    FunctionNotAllowed,
    #[error("only the endpoint's reviewer may decide on this run")]
    NotReviewer,
    #[error("run is {actual}, operation needs {expected}")]
    WrongState { actual: RunState, expected: String },
    #[error("run is not claimed by this endpoint")]
    NotClaimant,
    #[error("run has not finished")]
    NotTerminal,
    #[error("artifact content was purged by retention")]
    ArtifactPurged(Box<ArtifactBundle>),
    #[error("storage failure: {0}")]
    Storage(String),
}

impl BrokerError {
    pub fn code(&self) -> &'static str {
        use BrokerError::*;
        match self {
            AuthFailure => "auth_failure",
            InvalidToken => "invalid_token",
            InvalidAgentKey => "invalid_agent_key",
            InvalidDescriptor(_) => "invalid_descriptor",
            EmptyPayload => "empty_payload",
            InvalidSpec(_) => "invalid_spec",
            InvalidReport(_) => "invalid_report",
            Schema(_) => "schema_error",
            UnknownEndpoint(_) => "unknown_endpoint",
            UnknownFunction(_) => "unknown_function",
            UnknownRun(_) => "unknown_run",
            UnknownArtifact(_) => "unknown_artifact",
            FunctionNotAllowed => "function_not_allowed",
            NotReviewer => "not_reviewer",
            WrongState { .. } => "wrong_state",
            NotClaimant => "not_claimant",
            NotTerminal => "not_terminal",
            ArtifactPurged(_) => "artifact_purged",
            Storage(_) => "storage_failure",
        }
    }

    pub fn status(&self) -> StatusCode {
        use BrokerError::*;
        match self {
            AuthFailure | InvalidToken | InvalidAgentKey => StatusCode::UNAUTHORIZED,
            NotReviewer | FunctionNotAllowed | NotClaimant => StatusCode::FORBIDDEN,
            InvalidDescriptor(_) | EmptyPayload | InvalidSpec(_) | InvalidReport(_)
            | Schema(_) => StatusCode::BAD_REQUEST,
            UnknownEndpoint(_) | UnknownFunction(_) | UnknownRun(_) | UnknownArtifact(_) => {
                StatusCode::NOT_FOUND
            }
            WrongState { .. } | NotTerminal => StatusCode::CONFLICT,
            ArtifactPurged(_) => StatusCode::GONE,
            Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub(crate) fn wrong_state(actual: RunState, expected: &str) -> Self {
        BrokerError::WrongState {
            actual,
            expected: expected.to_string(),
        }
    }
}

impl From<std::io::Error> for BrokerError {
    fn from(err: std::io::Error) -> Self {
        BrokerError::Storage(err.to_string())
    }
}

pub type Result<T, E = BrokerError> = std::result::Result<T, E>;
