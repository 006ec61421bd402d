//! Request and response bodies of the broker HTTP API.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::ids::{ArtifactId, EndpointId, FunctionId, RunId};
use crate::state::RunState;
use crate::types::{
    ArtifactBundle, AuditEvent, EndpointMode, EndpointTemplate, PayloadKind, TaskResult, TaskRun,
    TaskSpec,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenRequest {
    pub client_id: String,
    pub client_secret: String,
}

/// Everything the caller chooses about a new endpoint. The broker assigns id,
/// agent key and status.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointDescriptor {
    pub display_name: String,
    pub mode: EndpointMode,
    #[serde(default)]
    pub protected: bool,
    #[serde(default)]
    pub reviewer: Option<String>,
    #[serde(default)]
    pub allow_list: BTreeSet<FunctionId>,
    #[serde(default)]
    pub template: Option<EndpointTemplate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointRegistration {
    pub endpoint_id: EndpointId,
    /// Returned exactly once; the broker keeps only its hash.
    pub agent_key: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegisterFunctionRequest {
    pub payload_kind: PayloadKind,
    pub payload: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionRegistration {
    pub function_id: FunctionId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitResponse {
    pub run_id: RunId,
    pub state: RunState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PollRequest {
    pub max_n: u32,
    /// Long-poll budget. The broker caps it.
    #[serde(default)]
    pub wait_seconds: u32,
}

/// A run handed to an agent. Function payloads travel with the claim so the
/// agent never needs a user token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClaimedTask {
    pub run_id: RunId,
    pub spec: TaskSpec,
    #[serde(default)]
    pub payload: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PollResponse {
    pub tasks: Vec<ClaimedTask>,
}

/// Non-terminal progress marker (`staging` or `running`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateReport {
    pub state: RunState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileUpload {
    pub relative_path: String,
    /// Standard base64.
    pub content_b64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultReport {
    pub terminal_state: RunState,
    pub result: TaskResult,
    #[serde(default)]
    pub artifact_files: Vec<FileUpload>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultAck {
    pub run_id: RunId,
    pub state: RunState,
    pub artifact_id: Option<ArtifactId>,
}

/// Bundle metadata plus file contents. `files` is empty once the bundle is purged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactContent {
    pub bundle: ArtifactBundle,
    pub files: Vec<FileUpload>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditPage {
    pub events: Vec<AuditEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunList {
    pub runs: Vec<TaskRun>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorBody {
    pub error_code: String,
    pub message: String,
    /// Present on `artifact_purged`: the retained metadata.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bundle: Option<ArtifactBundle>,
}
