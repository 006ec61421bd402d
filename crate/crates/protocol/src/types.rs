use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::ids::{ArtifactId, EndpointId, FunctionId, RunId, Timestamp};
use crate::state::{RunState, Transition};

/// A client credential. Only the salted hash of the secret is ever held.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Credential {
    pub client_id: String,
    pub client_secret_hash: String,
    pub owner_identity: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BearerToken {
    pub token: String,
    pub subject: String,
    pub issued_at: Timestamp,
    pub expires_at: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointMode {
    SingleUser,
    MultiUser,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointStatus {
    Online,
    Offline,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointRecord {
    pub endpoint_id: EndpointId,
    pub display_name: String,
    pub mode: EndpointMode,
    pub protected: bool,
    pub reviewer: Option<String>,
    /// Empty means unrestricted.
    pub allow_list: BTreeSet<FunctionId>,
    pub template_id: Option<String>,
    pub agent_key_hash: String,
    pub status: EndpointStatus,
    /// `None` until the agent polls for the first time.
    pub last_heartbeat: Option<Timestamp>,
    pub registered_at: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Local,
    Batch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointTemplate {
    pub template_id: String,
    pub provider_kind: ProviderKind,
    pub pilot_size: u32,
    /// Queue name, node count, walltime seconds and similar. Ignored for local providers.
    #[serde(default)]
    pub batch_directives: BTreeMap<String, String>,
    pub workspace_root: PathBuf,
    pub identity_map_ref: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    ShellScript,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionRecord {
    pub function_id: FunctionId,
    pub owner: String,
    pub payload_kind: PayloadKind,
    pub payload: String,
    pub registered_at: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Shell,
    Function,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepoRef {
    pub url: String,
    #[serde(rename = "ref")]
    pub git_ref: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub endpoint_id: EndpointId,
    pub kind: TaskKind,
    #[serde(default)]
    pub shell_cmd: Option<String>,
    #[serde(default)]
    pub function_id: Option<FunctionId>,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    #[serde(default)]
    pub repo: Option<RepoRef>,
    pub timeout_seconds: u64,
    /// Filled in by the broker from the submitting token's subject.
    #[serde(default)]
    pub requested_by: String,
}

impl TaskSpec {
    pub fn shell(endpoint_id: EndpointId, cmd: impl Into<String>) -> Self {
        Self {
            endpoint_id,
            kind: TaskKind::Shell,
            shell_cmd: Some(cmd.into()),
            function_id: None,
            args: Vec::new(),
            env: BTreeMap::new(),
            repo: None,
            timeout_seconds: 3600,
            requested_by: String::new(),
        }
    }

    pub fn function(endpoint_id: EndpointId, function_id: FunctionId) -> Self {
        Self {
            kind: TaskKind::Function,
            shell_cmd: None,
            function_id: Some(function_id),
            ..Self::shell(endpoint_id, "")
        }
    }

    pub fn with_repo(mut self, url: impl Into<String>, git_ref: impl Into<String>) -> Self {
        self.repo = Some(RepoRef {
            url: url.into(),
            git_ref: git_ref.into(),
        });
        self
    }

    pub fn with_timeout(mut self, seconds: u64) -> Self {
        self.timeout_seconds = seconds;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvenanceSnapshot {
    pub hostname: String,
    pub os_description: String,
    pub captured_env: BTreeMap<String, String>,
    pub tool_versions: BTreeMap<String, String>,
    pub captured_at: Timestamp,
    /// HEAD commit of the staged repository, when the task staged one.
    #[serde(default)]
    pub repo_commit: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskResult {
    pub exit_code: i32,
    pub stdout: String,
    pub stdout_truncated: bool,
    pub stderr: String,
    pub stderr_truncated: bool,
    pub duration_seconds: f64,
    #[serde(default)]
    pub provenance: Option<ProvenanceSnapshot>,
    /// Machine-readable cause when the run failed before or around the user command
    /// (`staging_failure`, `timeout`, `unmapped_identity`, ...).
    #[serde(default)]
    pub failure_reason: Option<String>,
}

impl TaskResult {
    /// Result for a run that never got to execute its command.
    pub fn aborted(reason: &str, message: impl Into<String>) -> Self {
        Self {
            exit_code: -1,
            stdout: String::new(),
            stdout_truncated: false,
            stderr: message.into(),
            stderr_truncated: false,
            duration_seconds: 0.0,
            provenance: None,
            failure_reason: Some(reason.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRun {
    pub run_id: RunId,
    pub spec: TaskSpec,
    pub state: RunState,
    pub transitions: Vec<Transition>,
    pub result: Option<TaskResult>,
    pub claimed_by: Option<String>,
    #[serde(default)]
    pub artifact_id: Option<ArtifactId>,
}

impl TaskRun {
    pub fn submitted_at(&self) -> Timestamp {
        self.transitions.first().map(|t| t.at).unwrap_or_default()
    }

    /// Time at which the run last entered its current state.
    pub fn state_since(&self) -> Timestamp {
        self.transitions.last().map(|t| t.at).unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactFile {
    pub relative_path: String,
    pub byte_size: u64,
    /// Lowercase hex SHA-256 of the content.
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactBundle {
    pub artifact_id: ArtifactId,
    pub run_id: RunId,
    pub files: Vec<ArtifactFile>,
    pub created_at: Timestamp,
    pub retention_days: u32,
    pub purged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditAction {
    TokenIssued,
    EndpointRegistered,
    FunctionRegistered,
    TaskSubmitted,
    ApprovalGranted,
    ApprovalRejected,
    TaskClaimed,
    StateChanged,
    ResultReported,
    ArtifactStored,
    ArtifactPurged,
    AuthFailure,
}

impl AuditAction {
    pub fn as_str(self) -> &'static str {
        use AuditAction::*;
        match self {
            TokenIssued => "token_issued",
            EndpointRegistered => "endpoint_registered",
            FunctionRegistered => "function_registered",
            TaskSubmitted => "task_submitted",
            ApprovalGranted => "approval_granted",
            ApprovalRejected => "approval_rejected",
            TaskClaimed => "task_claimed",
            StateChanged => "state_changed",
            ResultReported => "result_reported",
            ArtifactStored => "artifact_stored",
            ArtifactPurged => "artifact_purged",
            AuthFailure => "auth_failure",
        }
    }
}

impl std::str::FromStr for AuditAction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| format!("unknown audit action `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditEvent {
    pub seq: u64,
    pub timestamp: Timestamp,
    /// Owner identity, `agent:<endpoint_id>` or `system`.
    pub actor: String,
    pub action: AuditAction,
    pub subject: String,
    pub details: BTreeMap<String, String>,
}

pub const SYSTEM_ACTOR: &str = "system";

pub fn agent_actor(endpoint_id: &EndpointId) -> String {
    format!("agent:{endpoint_id}")
}
