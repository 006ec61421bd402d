//! In-memory broker state and the reducer that folds audit events into it.
//!
//! Every mutation of [`BrokerState`] goes through [`BrokerState::apply`], both
//! on the live path and during recovery, so the journal alone is sufficient
//! to rebuild the store.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ci_protocol::{
    decode_str, encode_string, validate_transition, ArtifactBundle, ArtifactId, AuditAction,
    AuditEvent, EndpointId, EndpointRecord, EndpointTemplate, FunctionId, FunctionRecord, RunId,
    RunState, TaskResult, TaskRun, TaskSpec, Timestamp, Transition, WireMessage,
};
use serde::{Deserialize, Serialize};

use crate::error::{BrokerError, Result};

/// Keys used in [`AuditEvent::details`].
pub mod detail {
    pub const TOKEN_SHA256: &str = "token_sha256";
    pub const EXPIRES_AT: &str = "expires_at";
    pub const CLIENT_ID: &str = "client_id";
    pub const ENDPOINT: &str = "endpoint";
    pub const TEMPLATE: &str = "template";
    pub const FUNCTION: &str = "function";
    pub const SPEC: &str = "spec";
    pub const ENDPOINT_ID: &str = "endpoint_id";
    pub const FROM: &str = "from";
    pub const TO: &str = "to";
    pub const CLAIMED_BY: &str = "claimed_by";
    pub const RESULT: &str = "result";
    pub const TERMINAL_STATE: &str = "terminal_state";
    pub const BUNDLE: &str = "bundle";
    pub const RUN_ID: &str = "run_id";
    pub const REASON: &str = "reason";
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrant {
    pub subject: String,
    pub issued_at: Timestamp,
    pub expires_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSlot {
    pub run: TaskRun,
    /// Journal position of the submission; FIFO tie-break within one millisecond.
    pub submit_seq: u64,
}

type QueueKey = (Timestamp, u64, RunId);

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BrokerState {
    pub last_seq: u64,
    /// Keyed by SHA-256 of the bearer token.
    pub tokens: BTreeMap<String, TokenGrant>,
    pub endpoints: BTreeMap<EndpointId, EndpointRecord>,
    pub templates: BTreeMap<String, EndpointTemplate>,
    pub functions: BTreeMap<FunctionId, FunctionRecord>,
    pub runs: BTreeMap<RunId, RunSlot>,
    pub artifacts: BTreeMap<ArtifactId, ArtifactBundle>,
    #[serde(skip)]
    queues: BTreeMap<EndpointId, BTreeSet<QueueKey>>,
}

#[derive(Debug, thiserror::Error)]
#[error("cannot apply audit event {seq} ({action}): {reason}")]
pub struct ReplayError {
    pub seq: u64,
    pub action: &'static str,
    pub reason: String,
}

impl From<ReplayError> for BrokerError {
    fn from(err: ReplayError) -> Self {
        BrokerError::Storage(err.to_string())
    }
}

fn field<'a>(event: &'a AuditEvent, key: &str) -> Result<&'a str, ReplayError> {
    event
        .details
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| replay_err(event, format!("missing detail `{key}`")))
}

fn parsed<T: WireMessage>(event: &AuditEvent, key: &str) -> Result<T, ReplayError> {
    decode_str(field(event, key)?).map_err(|e| replay_err(event, format!("detail `{key}`: {e}")))
}

fn parse_str<T: std::str::FromStr>(event: &AuditEvent, text: &str) -> Result<T, ReplayError>
where
    T::Err: std::fmt::Display,
{
    text.parse()
        .map_err(|e: T::Err| replay_err(event, format!("cannot parse `{text}`: {e}")))
}

fn replay_err(event: &AuditEvent, reason: impl Into<String>) -> ReplayError {
    ReplayError {
        seq: event.seq,
        action: event.action.as_str(),
        reason: reason.into(),
    }
}

impl BrokerState {
    pub fn run(&self, id: &RunId) -> Option<&TaskRun> {
        self.runs.get(id).map(|slot| &slot.run)
    }

    /// Queued runs of one endpoint in FIFO order.
    pub fn queued(&self, endpoint: &EndpointId) -> impl Iterator<Item = RunId> + '_ {
        self.queues
            .get(endpoint)
            .into_iter()
            .flat_map(|q| q.iter().map(|(_, _, id)| *id))
    }

    pub fn rebuild_indexes(&mut self) {
        self.queues.clear();
        for slot in self.runs.values() {
            if slot.run.state == RunState::Queued {
                self.queues
                    .entry(slot.run.spec.endpoint_id)
                    .or_default()
                    .insert((slot.run.submitted_at(), slot.submit_seq, slot.run.run_id));
            }
        }
    }

    pub fn apply(&mut self, event: &AuditEvent) -> Result<(), ReplayError> {
        if event.seq <= self.last_seq {
            return Err(replay_err(event, format!("already at seq {}", self.last_seq)));
        }
        match event.action {
            AuditAction::TokenIssued => {
                let hash = field(event, detail::TOKEN_SHA256)?.to_string();
                let expires_at = Timestamp(parse_str(event, field(event, detail::EXPIRES_AT)?)?);
                self.tokens.insert(
                    hash,
                    TokenGrant {
                        subject: event.actor.clone(),
                        issued_at: event.timestamp,
                        expires_at,
                    },
                );
            }
            AuditAction::AuthFailure | AuditAction::ApprovalGranted | AuditAction::ApprovalRejected => {}
            AuditAction::EndpointRegistered => {
                let record: EndpointRecord = parsed(event, detail::ENDPOINT)?;
                if let Some(text) = event.details.get(detail::TEMPLATE) {
                    let template: EndpointTemplate = decode_str(text)
                        .map_err(|e| replay_err(event, e.to_string()))?;
                    self.templates.insert(template.template_id.clone(), template);
                }
                self.endpoints.insert(record.endpoint_id, record);
            }
            AuditAction::FunctionRegistered => {
                let record: FunctionRecord = parsed(event, detail::FUNCTION)?;
                self.functions.insert(record.function_id, record);
            }
            AuditAction::TaskSubmitted => {
                let run_id: RunId = parse_str(event, &event.subject)?;
                let spec: TaskSpec = parsed(event, detail::SPEC)?;
                if self.runs.contains_key(&run_id) {
                    return Err(replay_err(event, "duplicate run id"));
                }
                let run = TaskRun {
                    run_id,
                    spec,
                    state: RunState::Submitted,
                    transitions: vec![Transition {
                        from: None,
                        to: RunState::Submitted,
                        at: event.timestamp,
                        actor: event.actor.clone(),
                    }],
                    result: None,
                    claimed_by: None,
                    artifact_id: None,
                };
                self.runs.insert(
                    run_id,
                    RunSlot {
                        run,
                        submit_seq: event.seq,
                    },
                );
            }
            AuditAction::StateChanged => {
                let run_id: RunId = parse_str(event, &event.subject)?;
                let from: RunState = parse_str(event, field(event, detail::FROM)?)?;
                let to: RunState = parse_str(event, field(event, detail::TO)?)?;
                let slot = self
                    .runs
                    .get_mut(&run_id)
                    .ok_or_else(|| replay_err(event, "unknown run"))?;
                if slot.run.state != from {
                    return Err(replay_err(
                        event,
                        format!("run is {} not {from}", slot.run.state),
                    ));
                }
                if !validate_transition(from, to) {
                    return Err(replay_err(event, format!("illegal edge {from} -> {to}")));
                }
                slot.run.state = to;
                slot.run.transitions.push(Transition {
                    from: Some(from),
                    to,
                    at: event.timestamp,
                    actor: event.actor.clone(),
                });
                let key = (slot.run.submitted_at(), slot.submit_seq, run_id);
                let endpoint = slot.run.spec.endpoint_id;
                if to == RunState::Queued {
                    self.queues.entry(endpoint).or_default().insert(key);
                } else if from == RunState::Queued {
                    if let Some(queue) = self.queues.get_mut(&endpoint) {
                        queue.remove(&key);
                    }
                }
            }
            AuditAction::TaskClaimed => {
                let run_id: RunId = parse_str(event, &event.subject)?;
                let claimed_by = field(event, detail::CLAIMED_BY)?.to_string();
                let slot = self
                    .runs
                    .get_mut(&run_id)
                    .ok_or_else(|| replay_err(event, "unknown run"))?;
                slot.run.claimed_by = Some(claimed_by);
            }
            AuditAction::ResultReported => {
                let run_id: RunId = parse_str(event, &event.subject)?;
                let result: TaskResult = parsed(event, detail::RESULT)?;
                let slot = self
                    .runs
                    .get_mut(&run_id)
                    .ok_or_else(|| replay_err(event, "unknown run"))?;
                slot.run.result = Some(result);
            }
            AuditAction::ArtifactStored => {
                let bundle: ArtifactBundle = parsed(event, detail::BUNDLE)?;
                if let Some(slot) = self.runs.get_mut(&bundle.run_id) {
                    slot.run.artifact_id = Some(bundle.artifact_id);
                }
                self.artifacts.insert(bundle.artifact_id, bundle);
            }
            AuditAction::ArtifactPurged => {
                let artifact_id: ArtifactId = parse_str(event, &event.subject)?;
                let bundle = self
                    .artifacts
                    .get_mut(&artifact_id)
                    .ok_or_else(|| replay_err(event, "unknown artifact"))?;
                bundle.purged = true;
            }
        }
        self.last_seq = event.seq;
        Ok(())
    }

    pub fn load_snapshot(path: &Path) -> Result<Option<Self>> {
        match std::fs::read(path) {
            Ok(bytes) => {
                let mut state: BrokerState = serde_json::from_slice(&bytes)
                    .map_err(|e| BrokerError::Storage(format!("{}: {e}", path.display())))?;
                state.rebuild_indexes();
                Ok(Some(state))
            }
            Err(err) if err.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(err) => Err(err.into()),
        }
    }

    /// Atomic replace via rename.
    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        let bytes = serde_json::to_vec(self)
            .map_err(|e| BrokerError::Storage(format!("snapshot encode: {e}")))?;
        std::fs::write(&tmp, bytes)?;
        std::fs::File::open(&tmp)?.sync_all()?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

/// Details map builder.
pub(crate) fn details<const N: usize>(pairs: [(&str, String); N]) -> BTreeMap<String, String> {
    pairs
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

pub(crate) fn json<T: Serialize>(value: &T) -> String {
    encode_string(value)
}
