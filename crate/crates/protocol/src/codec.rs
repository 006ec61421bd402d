//! Canonical wire encoding: UTF-8 JSON, snake_case field names, unknown fields rejected.
//!
//! Decoding is two-phase: structural deserialization (with the JSON path of the
//! offending field on failure) followed by the message's own invariant check.

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::api::*;
use crate::state::{replay_path, RunState};
use crate::types::*;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("schema error at `{field}`: {message}")]
pub struct SchemaError {
    /// Dotted path of the offending field (`.` for the document root).
    pub field: String,
    pub message: String,
}

impl SchemaError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

/// A protocol value with invariants beyond what its shape expresses.
pub trait WireMessage: Serialize + DeserializeOwned {
    fn check(&self) -> Result<(), SchemaError> {
        Ok(())
    }
}

pub fn encode<T: Serialize + ?Sized>(msg: &T) -> Vec<u8> {
    // Every protocol type has string map keys and finite numbers; this cannot fail.
    serde_json::to_vec(msg).expect("protocol types always serialize")
}

pub fn encode_string<T: Serialize + ?Sized>(msg: &T) -> String {
    String::from_utf8(encode(msg)).expect("serde_json emits UTF-8")
}

pub fn decode<T: WireMessage>(bytes: &[u8]) -> Result<T, SchemaError> {
    let mut de = serde_json::Deserializer::from_slice(bytes);
    let value: T = serde_path_to_error::deserialize(&mut de).map_err(|err| {
        let path = err.path().to_string();
        let inner = err.into_inner();
        let message = inner.to_string();
        SchemaError {
            field: join_field(&path, backticked(&message)),
            message,
        }
    })?;
    de.end()
        .map_err(|e| SchemaError::new(".", format!("trailing data: {e}")))?;
    value.check()?;
    Ok(value)
}

pub fn decode_str<T: WireMessage>(text: &str) -> Result<T, SchemaError> {
    decode(text.as_bytes())
}

/// serde reports missing fields against the enclosing object; pull the field
/// name out of the message so callers see the full path.
fn backticked(message: &str) -> Option<&str> {
    if !message.starts_with("missing field") {
        return None;
    }
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(&message[start..start + len])
}

fn join_field(path: &str, leaf: Option<&str>) -> String {
    match (path, leaf) {
        (".", Some(leaf)) | ("", Some(leaf)) => leaf.to_string(),
        (path, Some(leaf)) => format!("{path}.{leaf}"),
        (path, None) => path.to_string(),
    }
}

fn prefixed(prefix: &str, err: SchemaError) -> SchemaError {
    SchemaError {
        field: format!("{prefix}.{}", err.field),
        message: err.message,
    }
}

impl WireMessage for TaskSpec {
    fn check(&self) -> Result<(), SchemaError> {
        match self.kind {
            TaskKind::Shell => {
                match self.shell_cmd.as_deref() {
                    None => return Err(SchemaError::new("shell_cmd", "required for kind=shell")),
                    Some(cmd) if cmd.trim().is_empty() => {
                        return Err(SchemaError::new("shell_cmd", "must not be empty"))
                    }
                    Some(_) => {}
                }
                if self.function_id.is_some() {
                    return Err(SchemaError::new("function_id", "not allowed for kind=shell"));
                }
            }
            TaskKind::Function => {
                if self.function_id.is_none() {
                    return Err(SchemaError::new(
                        "function_id",
                        "required for kind=function",
                    ));
                }
                if self.shell_cmd.is_some() {
                    return Err(SchemaError::new(
                        "shell_cmd",
                        "not allowed for kind=function",
                    ));
                }
            }
        }
        if self.timeout_seconds == 0 {
            return Err(SchemaError::new("timeout_seconds", "must be positive"));
        }
        if let Some(repo) = &self.repo {
            if repo.url.is_empty() {
                return Err(SchemaError::new("repo.url", "must not be empty"));
            }
            if repo.git_ref.is_empty() {
                return Err(SchemaError::new("repo.ref", "must not be empty"));
            }
        }
        Ok(())
    }
}

impl WireMessage for TaskResult {
    fn check(&self) -> Result<(), SchemaError> {
        if !self.duration_seconds.is_finite() || self.duration_seconds < 0.0 {
            return Err(SchemaError::new(
                "duration_seconds",
                "must be a finite non-negative number",
            ));
        }
        Ok(())
    }
}

impl WireMessage for TaskRun {
    fn check(&self) -> Result<(), SchemaError> {
        self.spec.check().map_err(|e| prefixed("spec", e))?;
        let end = replay_path(&self.transitions)
            .map_err(|e| SchemaError::new("transitions", e.to_string()))?;
        if end != self.state {
            return Err(SchemaError::new(
                "state",
                format!("transitions end in {end} but state is {}", self.state),
            ));
        }
        let finished = matches!(self.state, RunState::Completed | RunState::Failed);
        match (&self.result, finished) {
            (Some(result), true) => {
                result.check().map_err(|e| prefixed("result", e))?;
                let reached_running = self
                    .transitions
                    .iter()
                    .any(|t| t.to == RunState::Running);
                let completed = self.state == RunState::Completed;
                if reached_running && (result.exit_code == 0) != completed {
                    return Err(SchemaError::new(
                        "result.exit_code",
                        format!("exit code {} contradicts state {}", result.exit_code, self.state),
                    ));
                }
            }
            (None, false) => {}
            (Some(_), false) => {
                return Err(SchemaError::new("result", "present on an unfinished run"))
            }
            (None, true) => return Err(SchemaError::new("result", "missing on a finished run")),
        }
        Ok(())
    }
}

impl WireMessage for BearerToken {
    fn check(&self) -> Result<(), SchemaError> {
        if self.expires_at <= self.issued_at {
            return Err(SchemaError::new("expires_at", "must be after issued_at"));
        }
        Ok(())
    }
}

fn check_reviewer(protected: bool, reviewer: &Option<String>) -> Result<(), SchemaError> {
    match (protected, reviewer.as_deref()) {
        (true, None) => Err(SchemaError::new(
            "reviewer",
            "a protected endpoint needs exactly one reviewer",
        )),
        (_, Some(r)) if r.trim().is_empty() => {
            Err(SchemaError::new("reviewer", "must not be empty"))
        }
        _ => Ok(()),
    }
}

impl WireMessage for EndpointTemplate {
    fn check(&self) -> Result<(), SchemaError> {
        if self.pilot_size == 0 {
            return Err(SchemaError::new("pilot_size", "must be at least 1"));
        }
        if self.template_id.is_empty() {
            return Err(SchemaError::new("template_id", "must not be empty"));
        }
        Ok(())
    }
}

impl WireMessage for EndpointRecord {
    fn check(&self) -> Result<(), SchemaError> {
        check_reviewer(self.protected, &self.reviewer)
    }
}

impl WireMessage for EndpointDescriptor {
    fn check(&self) -> Result<(), SchemaError> {
        if self.display_name.trim().is_empty() {
            return Err(SchemaError::new("display_name", "must not be empty"));
        }
        check_reviewer(self.protected, &self.reviewer)?;
        if let Some(template) = &self.template {
            template.check().map_err(|e| prefixed("template", e))?;
        }
        Ok(())
    }
}

impl WireMessage for ArtifactBundle {
    fn check(&self) -> Result<(), SchemaError> {
        if self.retention_days == 0 {
            return Err(SchemaError::new("retention_days", "must be positive"));
        }
        Ok(())
    }
}

impl WireMessage for ProvenanceSnapshot {
    fn check(&self) -> Result<(), SchemaError> {
        if let Some(key) = self
            .captured_env
            .keys()
            .find(|k| crate::policy::is_secret_env_key(k))
        {
            return Err(SchemaError::new(
                format!("captured_env.{key}"),
                "secret-looking variable in captured environment",
            ));
        }
        Ok(())
    }
}

impl WireMessage for ClaimedTask {
    fn check(&self) -> Result<(), SchemaError> {
        self.spec.check().map_err(|e| prefixed("spec", e))
    }
}

impl WireMessage for PollResponse {
    fn check(&self) -> Result<(), SchemaError> {
        for (i, task) in self.tasks.iter().enumerate() {
            task.check().map_err(|e| prefixed(&format!("tasks.{i}"), e))?;
        }
        Ok(())
    }
}

impl WireMessage for ResultReport {
    fn check(&self) -> Result<(), SchemaError> {
        if !matches!(self.terminal_state, RunState::Completed | RunState::Failed) {
            return Err(SchemaError::new(
                "terminal_state",
                "must be completed or failed",
            ));
        }
        self.result.check().map_err(|e| prefixed("result", e))
    }
}

impl WireMessage for StateReport {
    fn check(&self) -> Result<(), SchemaError> {
        if !matches!(self.state, RunState::Staging | RunState::Running) {
            return Err(SchemaError::new("state", "must be staging or running"));
        }
        Ok(())
    }
}

impl WireMessage for RegisterFunctionRequest {}
impl WireMessage for TokenRequest {}
impl WireMessage for EndpointRegistration {}
impl WireMessage for FunctionRegistration {}
impl WireMessage for SubmitResponse {}
impl WireMessage for PollRequest {}
impl WireMessage for FileUpload {}
impl WireMessage for ResultAck {}
impl WireMessage for ArtifactContent {}
impl WireMessage for AuditPage {}
impl WireMessage for RunList {}
impl WireMessage for ErrorBody {}
impl WireMessage for Credential {}
impl WireMessage for FunctionRecord {}
impl WireMessage for AuditEvent {}
impl WireMessage for crate::state::Transition {}


impl<T: WireMessage> WireMessage for Vec<T> {
    fn check(&self) -> Result<(), SchemaError> {
        self.iter().try_for_each(WireMessage::check)
    }
}
