use std::collections::{BTreeMap, HashMap};
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ci_protocol::api::*;
use ci_protocol::policy::{allow_list_permits, reached_execution, DEFAULT_RETENTION_DAYS};
use ci_protocol::*;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::sync::Notify;

use crate::clock::{Clock, SystemClock};
use crate::error::{BrokerError, Result};
use crate::journal::Journal;
use crate::secrets;
use crate::state::{detail, details, json, BrokerState};

pub const AUDIT_FILE: &str = "audit.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";
pub const ARTIFACT_DIR: &str = "artifacts";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BrokerConfig {
    pub token_ttl_seconds: i64,
    pub approval_ttl_seconds: i64,
    pub heartbeat_timeout_seconds: i64,
    pub retention_days: u32,
    /// Write a snapshot after this many journal events.
    pub snapshot_every: u64,
    pub fsync: bool,
    pub long_poll_max_seconds: u32,
    pub credentials: Vec<Credential>,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self {
            token_ttl_seconds: 3600,
            approval_ttl_seconds: 7 * 24 * 3600,
            heartbeat_timeout_seconds: 60,
            retention_days: DEFAULT_RETENTION_DAYS,
            snapshot_every: 256,
            fsync: true,
            long_poll_max_seconds: 25,
            credentials: Vec::new(),
        }
    }
}

/// Filter for [`Broker::query_audit`]. Seq bounds are inclusive.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditFilter {
    pub subject: Option<String>,
    pub action: Option<AuditAction>,
    pub from_seq: Option<u64>,
    pub to_seq: Option<u64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFilter {
    pub endpoint_id: Option<EndpointId>,
    pub state: Option<RunState>,
}

struct Draft {
    actor: String,
    action: AuditAction,
    subject: String,
    details: BTreeMap<String, String>,
}

impl Draft {
    fn new(actor: impl Into<String>, action: AuditAction, subject: impl ToString) -> Self {
        Self {
            actor: actor.into(),
            action,
            subject: subject.to_string(),
            details: BTreeMap::new(),
        }
    }

    fn with(mut self, details: BTreeMap<String, String>) -> Self {
        self.details = details;
        self
    }

    fn transition(actor: &str, run: RunId, from: RunState, to: RunState) -> Self {
        Draft::new(actor, AuditAction::StateChanged, run).with(details([
            (detail::FROM, from.to_string()),
            (detail::TO, to.to_string()),
        ]))
    }
}

struct Inner {
    state: BrokerState,
    journal: Journal,
    events: Vec<AuditEvent>,
    since_snapshot: u64,
}

/// The coordination service. All mutations are serialized behind one lock and
/// journaled before they become visible.
pub struct Broker {
    inner: Mutex<Inner>,
    credentials: HashMap<String, Credential>,
    config: BrokerConfig,
    clock: Arc<dyn Clock>,
    dir: PathBuf,
    queued: Notify,
}

impl Broker {
    pub fn open(dir: impl AsRef<Path>, config: BrokerConfig) -> Result<Self> {
        Self::open_with_clock(dir, config, Arc::new(SystemClock))
    }

    /// Loads the snapshot (if any), replays the journal past it, and tidies
    /// artifact directories the recovered state does not reference.
    pub fn open_with_clock(
        dir: impl AsRef<Path>,
        config: BrokerConfig,
        clock: Arc<dyn Clock>,
    ) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(dir.join(ARTIFACT_DIR))?;
        let mut state = BrokerState::load_snapshot(&dir.join(SNAPSHOT_FILE))?.unwrap_or_default();
        let (journal, events) = Journal::open(&dir.join(AUDIT_FILE), config.fsync)?;
        let journal_end = events.last().map_or(0, |e| e.seq);
        if state.last_seq > journal_end {
            return Err(BrokerError::Storage(format!(
                "snapshot is at seq {} but the journal ends at {journal_end}",
                state.last_seq
            )));
        }
        let mut replayed = 0;
        let resume_after = state.last_seq;
        for event in events.iter().filter(|e| e.seq > resume_after) {
            state.apply(event)?;
            replayed += 1;
        }
        tracing::info!(
            dir = %dir.display(),
            events = events.len(),
            replayed,
            runs = state.runs.len(),
            "broker state recovered"
        );

        let mut credentials = HashMap::new();
        for cred in &config.credentials {
            if credentials
                .insert(cred.client_id.clone(), cred.clone())
                .is_some()
            {
                return Err(BrokerError::Storage(format!(
                    "duplicate client_id `{}` in configuration",
                    cred.client_id
                )));
            }
        }

        let broker = Self {
            inner: Mutex::new(Inner {
                state,
                journal,
                events,
                since_snapshot: replayed,
            }),
            credentials,
            config,
            clock,
            dir,
            queued: Notify::new(),
        };
        broker.tidy_artifacts()?;
        Ok(broker)
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.config
    }

    pub fn state_dir(&self) -> &Path {
        &self.dir
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    /// Adds a credential at runtime (tests and bootstrap). Credentials are
    /// configuration, not journaled state.
    pub fn with_credential(mut self, client_id: &str, secret: &str, owner: &str) -> Self {
        self.credentials.insert(
            client_id.to_string(),
            Credential {
                client_id: client_id.to_string(),
                client_secret_hash: secrets::hash_secret(secret),
                owner_identity: owner.to_string(),
            },
        );
        self
    }

    fn commit(&self, inner: &mut Inner, drafts: Vec<Draft>) -> Result<Vec<AuditEvent>> {
        if drafts.is_empty() {
            return Ok(Vec::new());
        }
        let now = self.clock.now();
        let first = inner.journal.next_seq();
        let events: Vec<AuditEvent> = drafts
            .into_iter()
            .enumerate()
            .map(|(i, d)| AuditEvent {
                seq: first + i as u64,
                timestamp: now,
                actor: d.actor,
                action: d.action,
                subject: d.subject,
                details: d.details,
            })
            .collect();
        // Callers validate before committing; a reducer error here is a bug.
        inner.journal.append(&events)?;
        for event in &events {
            inner.state.apply(event)?;
        }
        inner.events.extend(events.iter().cloned());
        inner.since_snapshot += events.len() as u64;
        if inner.since_snapshot >= self.config.snapshot_every {
            inner
                .state
                .write_snapshot(&self.dir.join(SNAPSHOT_FILE))?;
            inner.since_snapshot = 0;
        }
        Ok(events)
    }

    pub fn snapshot(&self) -> Result<()> {
        let mut inner = self.inner.lock();
        inner.state.write_snapshot(&self.dir.join(SNAPSHOT_FILE))?;
        inner.since_snapshot = 0;
        Ok(())
    }

    fn auth_failure(&self, inner: &mut Inner, actor: &str, subject: &str, reason: &str) {
        let draft = Draft::new(actor, AuditAction::AuthFailure, subject)
            .with(details([(detail::REASON, reason.to_string())]));
        if let Err(err) = self.commit(inner, vec![draft]) {
            tracing::error!(%err, "failed to journal auth failure");
        }
    }

    fn subject_of(&self, inner: &mut Inner, token: &str) -> Result<String> {
        let hash = secrets::sha256_hex(token.as_bytes());
        let now = self.clock.now();
        match inner.state.tokens.get(&hash) {
            Some(grant) if now < grant.expires_at => Ok(grant.subject.clone()),
            found => {
                let reason = if found.is_some() { "expired_token" } else { "unknown_token" };
                self.auth_failure(inner, SYSTEM_ACTOR, "bearer", reason);
                Err(BrokerError::InvalidToken)
            }
        }
    }

    /// Resolves a bearer token to its subject.
    pub fn authenticate(&self, token: &str) -> Result<String> {
        let mut inner = self.inner.lock();
        self.subject_of(&mut inner, token)
    }

    // ---- credentials -------------------------------------------------------

    pub fn issue_token(&self, client_id: &str, client_secret: &str) -> Result<BearerToken> {
        let credential = self.credentials.get(client_id);
        let ok = match credential {
            Some(cred) => secrets::verify_secret(client_secret, &cred.client_secret_hash),
            None => secrets::verify_against_dummy(client_secret),
        };
        let mut inner = self.inner.lock();
        let Some(cred) = credential.filter(|_| ok) else {
            self.auth_failure(&mut inner, SYSTEM_ACTOR, client_id, "bad_client_credentials");
            return Err(BrokerError::AuthFailure);
        };
        let token = secrets::random_secret();
        let issued_at = self.clock.now();
        let expires_at = issued_at.plus_secs(self.config.token_ttl_seconds.max(1));
        let draft = Draft::new(&cred.owner_identity, AuditAction::TokenIssued, client_id).with(
            details([
                (detail::TOKEN_SHA256, secrets::sha256_hex(token.as_bytes())),
                (detail::EXPIRES_AT, expires_at.millis().to_string()),
                (detail::CLIENT_ID, client_id.to_string()),
            ]),
        );
        let events = self.commit(&mut inner, vec![draft])?;
        Ok(BearerToken {
            token,
            subject: cred.owner_identity.clone(),
            issued_at: events[0].timestamp,
            expires_at,
        })
    }

    // ---- registries --------------------------------------------------------

    pub fn register_endpoint(
        &self,
        token: &str,
        descriptor: EndpointDescriptor,
    ) -> Result<EndpointRegistration> {
        let mut inner = self.inner.lock();
        let owner = self.subject_of(&mut inner, token)?;
        descriptor
            .check()
            .map_err(|e| BrokerError::InvalidDescriptor(e.to_string()))?;
        if let Some(unknown) = descriptor
            .allow_list
            .iter()
            .find(|f| !inner.state.functions.contains_key(f))
        {
            return Err(BrokerError::InvalidDescriptor(format!(
                "allow_list names unregistered function {unknown}"
            )));
        }
        let agent_key = secrets::random_secret();
        let endpoint_id = EndpointId::new();
        let record = EndpointRecord {
            endpoint_id,
            display_name: descriptor.display_name,
            mode: descriptor.mode,
            protected: descriptor.protected,
            reviewer: descriptor.reviewer,
            allow_list: descriptor.allow_list,
            template_id: descriptor.template.as_ref().map(|t| t.template_id.clone()),
            agent_key_hash: secrets::sha256_hex(agent_key.as_bytes()),
            status: EndpointStatus::Offline,
            last_heartbeat: None,
            registered_at: self.clock.now(),
        };
        let mut d = details([(detail::ENDPOINT, json(&record))]);
        if let Some(template) = &descriptor.template {
            d.insert(detail::TEMPLATE.to_string(), json(template));
        }
        let draft = Draft::new(&owner, AuditAction::EndpointRegistered, endpoint_id).with(d);
        self.commit(&mut inner, vec![draft])?;
        Ok(EndpointRegistration {
            endpoint_id,
            agent_key,
        })
    }

    pub fn register_function(
        &self,
        token: &str,
        request: RegisterFunctionRequest,
    ) -> Result<FunctionRegistration> {
        let mut inner = self.inner.lock();
        let owner = self.subject_of(&mut inner, token)?;
        if request.payload.trim().is_empty() {
            return Err(BrokerError::EmptyPayload);
        }
        let record = FunctionRecord {
            function_id: FunctionId::new(),
            owner: owner.clone(),
            payload_kind: request.payload_kind,
            payload: request.payload,
            registered_at: self.clock.now(),
        };
        let function_id = record.function_id;
        let draft = Draft::new(owner, AuditAction::FunctionRegistered, function_id)
            .with(details([(detail::FUNCTION, json(&record))]));
        self.commit(&mut inner, vec![draft])?;
        Ok(FunctionRegistration { function_id })
    }

    pub fn get_function(&self, token: &str, id: &FunctionId) -> Result<FunctionRecord> {
        let mut inner = self.inner.lock();
        self.subject_of(&mut inner, token)?;
        inner
            .state
            .functions
            .get(id)
            .cloned()
            .ok_or_else(|| BrokerError::UnknownFunction(id.to_string()))
    }

    fn with_live_status(&self, mut record: EndpointRecord) -> EndpointRecord {
        let now = self.clock.now();
        let online = record.last_heartbeat.is_some_and(|hb| {
            now.since(hb) <= self.config.heartbeat_timeout_seconds * 1000
        });
        record.status = if online {
            EndpointStatus::Online
        } else {
            EndpointStatus::Offline
        };
        record
    }

    pub fn get_endpoint(&self, token: &str, id: &EndpointId) -> Result<EndpointRecord> {
        let mut inner = self.inner.lock();
        self.subject_of(&mut inner, token)?;
        let record = inner
            .state
            .endpoints
            .get(id)
            .cloned()
            .ok_or_else(|| BrokerError::UnknownEndpoint(id.to_string()))?;
        Ok(self.with_live_status(record))
    }

    pub fn list_endpoints(&self, token: &str) -> Result<Vec<EndpointRecord>> {
        let mut inner = self.inner.lock();
        self.subject_of(&mut inner, token)?;
        let records: Vec<_> = inner.state.endpoints.values().cloned().collect();
        Ok(records
            .into_iter()
            .map(|r| self.with_live_status(r))
            .collect())
    }

    // ---- task submission and approval -----------------------------------------

    pub fn submit_task(&self, token: &str, mut spec: TaskSpec) -> Result<SubmitResponse> {
        let mut inner = self.inner.lock();
        let subject = self.subject_of(&mut inner, token)?;
        spec.check()
            .map_err(|e| BrokerError::InvalidSpec(e.to_string()))?;
        let endpoint = inner
            .state
            .endpoints
            .get(&spec.endpoint_id)
            .ok_or_else(|| BrokerError::UnknownEndpoint(spec.endpoint_id.to_string()))?;
        if let Some(function_id) = spec.function_id {
            if !inner.state.functions.contains_key(&function_id) {
                return Err(BrokerError::UnknownFunction(function_id.to_string()));
            }
        }
        if !allow_list_permits(&endpoint.allow_list, &spec) {
            return Err(BrokerError::FunctionNotAllowed);
        }
        let next = if endpoint.protected {
            RunState::PendingApproval
        } else {
            RunState::Queued
        };
        spec.requested_by = subject.clone();
        let run_id = RunId::new();
        let drafts = vec![
            Draft::new(&subject, AuditAction::TaskSubmitted, run_id).with(details([
                (detail::SPEC, json(&spec)),
                (detail::ENDPOINT_ID, spec.endpoint_id.to_string()),
            ])),
            Draft::transition(&subject, run_id, RunState::Submitted, next),
        ];
        self.commit(&mut inner, drafts)?;
        drop(inner);
        if next == RunState::Queued {
            self.queued.notify_waiters();
        }
        Ok(SubmitResponse {
            run_id,
            state: next,
        })
    }

    pub fn approve(&self, token: &str, run_id: &RunId) -> Result<TaskRun> {
        self.decide(token, run_id, true)
    }

    pub fn reject(&self, token: &str, run_id: &RunId) -> Result<TaskRun> {
        self.decide(token, run_id, false)
    }

    fn decide(&self, token: &str, run_id: &RunId, approve: bool) -> Result<TaskRun> {
        let mut inner = self.inner.lock();
        let subject = self.subject_of(&mut inner, token)?;
        let run = inner
            .state
            .run(run_id)
            .ok_or_else(|| BrokerError::UnknownRun(run_id.to_string()))?;
        let endpoint = inner
            .state
            .endpoints
            .get(&run.spec.endpoint_id)
            .ok_or_else(|| BrokerError::UnknownEndpoint(run.spec.endpoint_id.to_string()))?;
        if !endpoint.protected || endpoint.reviewer.as_deref() != Some(subject.as_str()) {
            return Err(BrokerError::NotReviewer);
        }
        if run.state != RunState::PendingApproval {
            return Err(BrokerError::wrong_state(run.state, "pending_approval"));
        }
        if self.approval_expired(run) {
            let draft =
                Draft::transition(SYSTEM_ACTOR, *run_id, RunState::PendingApproval, RunState::Expired);
            self.commit(&mut inner, vec![draft])?;
            return Err(BrokerError::wrong_state(RunState::Expired, "pending_approval"));
        }
        let endpoint_id = run.spec.endpoint_id.to_string();
        let (action, next) = if approve {
            (AuditAction::ApprovalGranted, RunState::Queued)
        } else {
            (AuditAction::ApprovalRejected, RunState::Rejected)
        };
        let drafts = vec![
            Draft::new(&subject, action, run_id)
                .with(details([(detail::ENDPOINT_ID, endpoint_id)])),
            Draft::transition(&subject, *run_id, RunState::PendingApproval, next),
        ];
        self.commit(&mut inner, drafts)?;
        let run = inner.state.run(run_id).cloned().expect("run just updated");
        drop(inner);
        if approve {
            self.queued.notify_waiters();
        }
        Ok(run)
    }

    fn approval_expired(&self, run: &TaskRun) -> bool {
        run.state == RunState::PendingApproval
            && self.clock.now().since(run.state_since()) > self.config.approval_ttl_seconds * 1000
    }

    /// Moves every pending approval older than the approval TTL to `expired`.
    pub fn expire_approvals(&self) -> Result<usize> {
        let mut inner = self.inner.lock();
        let stale: Vec<RunId> = inner
            .state
            .runs
            .values()
            .filter(|slot| self.approval_expired(&slot.run))
            .map(|slot| slot.run.run_id)
            .collect();
        let drafts = stale
            .iter()
            .map(|id| {
                Draft::transition(SYSTEM_ACTOR, *id, RunState::PendingApproval, RunState::Expired)
            })
            .collect();
        self.commit(&mut inner, drafts)?;
        Ok(stale.len())
    }

    // ---- agent side --------------------------------------------------------

    fn check_agent(&self, inner: &mut Inner, endpoint_id: &EndpointId, key: &str) -> Result<()> {
        let Some(endpoint) = inner.state.endpoints.get(endpoint_id) else {
            return Err(BrokerError::UnknownEndpoint(endpoint_id.to_string()));
        };
        if !secrets::verify_key(key, &endpoint.agent_key_hash) {
            self.auth_failure(
                inner,
                &agent_actor(endpoint_id),
                &endpoint_id.to_string(),
                "invalid_agent_key",
            );
            return Err(BrokerError::InvalidAgentKey);
        }
        Ok(())
    }

    /// Claims up to `max_n` queued runs for the endpoint, oldest first.
    pub fn agent_poll(
        &self,
        endpoint_id: &EndpointId,
        agent_key: &str,
        max_n: u32,
    ) -> Result<Vec<ClaimedTask>> {
        let mut inner = self.inner.lock();
        self.check_agent(&mut inner, endpoint_id, agent_key)?;
        let now = self.clock.now();
        if let Some(endpoint) = inner.state.endpoints.get_mut(endpoint_id) {
            endpoint.last_heartbeat = Some(now);
            endpoint.status = EndpointStatus::Online;
        }
        let picked: Vec<RunId> = inner
            .state
            .queued(endpoint_id)
            .take(max_n as usize)
            .collect();
        let actor = agent_actor(endpoint_id);
        let mut drafts = Vec::with_capacity(picked.len() * 2);
        for run_id in &picked {
            drafts.push(
                Draft::new(&actor, AuditAction::TaskClaimed, run_id)
                    .with(details([(detail::CLAIMED_BY, actor.clone())])),
            );
            drafts.push(Draft::transition(
                &actor,
                *run_id,
                RunState::Queued,
                RunState::Claimed,
            ));
        }
        self.commit(&mut inner, drafts)?;
        Ok(picked
            .iter()
            .map(|id| {
                let run = inner.state.run(id).expect("claimed run exists");
                let payload = run
                    .spec
                    .function_id
                    .and_then(|f| inner.state.functions.get(&f))
                    .map(|f| f.payload.clone());
                ClaimedTask {
                    run_id: *id,
                    spec: run.spec.clone(),
                    payload,
                }
            })
            .collect())
    }

    /// [`Broker::agent_poll`], holding the request open for up to `wait` while
    /// nothing is queued.
    pub async fn agent_poll_wait(
        &self,
        endpoint_id: &EndpointId,
        agent_key: &str,
        max_n: u32,
        wait: Duration,
    ) -> Result<Vec<ClaimedTask>> {
        let cap = Duration::from_secs(self.config.long_poll_max_seconds as u64);
        let deadline = tokio::time::Instant::now() + wait.min(cap);
        loop {
            let notified = self.queued.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            let claimed = self.agent_poll(endpoint_id, agent_key, max_n)?;
            if !claimed.is_empty() || tokio::time::Instant::now() >= deadline {
                return Ok(claimed);
            }
            if tokio::time::timeout_at(deadline, notified).await.is_err() {
                return Ok(Vec::new());
            }
        }
    }

    fn claimed_run<'a>(
        &self,
        inner: &'a Inner,
        endpoint_id: &EndpointId,
        run_id: &RunId,
    ) -> Result<&'a TaskRun> {
        let run = inner
            .state
            .run(run_id)
            .ok_or_else(|| BrokerError::UnknownRun(run_id.to_string()))?;
        if run.spec.endpoint_id != *endpoint_id
            || run.claimed_by.as_deref() != Some(agent_actor(endpoint_id).as_str())
        {
            return Err(BrokerError::NotClaimant);
        }
        Ok(run)
    }

    /// Records a `staging` or `running` progress marker. Repeating the current
    /// marker is a no-op.
    pub fn report_state(
        &self,
        endpoint_id: &EndpointId,
        agent_key: &str,
        run_id: &RunId,
        state: RunState,
    ) -> Result<TaskRun> {
        if !matches!(state, RunState::Staging | RunState::Running) {
            return Err(BrokerError::InvalidReport(format!(
                "{state} is not a progress marker"
            )));
        }
        let mut inner = self.inner.lock();
        self.check_agent(&mut inner, endpoint_id, agent_key)?;
        let run = self.claimed_run(&inner, endpoint_id, run_id)?;
        let actor = agent_actor(endpoint_id);
        let drafts = match (run.state, state) {
            (current, wanted) if current == wanted => Vec::new(),
            (RunState::Claimed, RunState::Staging) | (RunState::Staging, RunState::Running) => {
                vec![Draft::transition(&actor, *run_id, run.state, state)]
            }
            (RunState::Claimed, RunState::Running) => vec![
                Draft::transition(&actor, *run_id, RunState::Claimed, RunState::Staging),
                Draft::transition(&actor, *run_id, RunState::Staging, RunState::Running),
            ],
            (current, _) => return Err(BrokerError::wrong_state(current, "claimed or staging")),
        };
        self.commit(&mut inner, drafts)?;
        Ok(inner.state.run(run_id).cloned().expect("run exists"))
    }

    /// Stores a terminal result. A byte-identical repeat of an accepted report
    /// is acknowledged without journaling anything.
    pub fn report_result(
        &self,
        endpoint_id: &EndpointId,
        agent_key: &str,
        run_id: &RunId,
        report: ResultReport,
    ) -> Result<ResultAck> {
        report.check()?;
        let mut inner = self.inner.lock();
        self.check_agent(&mut inner, endpoint_id, agent_key)?;
        let run = self.claimed_run(&inner, endpoint_id, run_id)?;

        if run.state.is_terminal() {
            if run.state == report.terminal_state && run.result.as_ref() == Some(&report.result) {
                return Ok(ResultAck {
                    run_id: *run_id,
                    state: run.state,
                    artifact_id: run.artifact_id,
                });
            }
            return Err(BrokerError::wrong_state(run.state, "claimed, staging or running"));
        }
        if !matches!(
            run.state,
            RunState::Claimed | RunState::Staging | RunState::Running
        ) {
            return Err(BrokerError::wrong_state(run.state, "claimed, staging or running"));
        }

        let executed = reached_execution(&report.result);
        let terminal = report.terminal_state;
        match (terminal, executed, report.result.exit_code) {
            (RunState::Completed, false, _) => {
                return Err(BrokerError::InvalidReport(
                    "a run that never executed cannot complete".into(),
                ))
            }
            (RunState::Completed, true, code) if code != 0 => {
                return Err(BrokerError::InvalidReport(format!(
                    "completed with exit code {code}"
                )))
            }
            (RunState::Failed, true, 0) => {
                return Err(BrokerError::InvalidReport(
                    "failed with exit code 0".into(),
                ))
            }
            _ => {}
        }
        let mut path = Vec::new();
        let mut at = run.state;
        if at == RunState::Claimed {
            path.push(RunState::Staging);
            at = RunState::Staging;
        }
        if executed && at == RunState::Staging {
            path.push(RunState::Running);
        }

        let bundle = if report.artifact_files.is_empty() {
            None
        } else {
            Some(self.store_artifacts(*run_id, &report.artifact_files)?)
        };

        let actor = agent_actor(endpoint_id);
        let mut drafts = Vec::new();
        let mut from = run.state;
        for step in path {
            drafts.push(Draft::transition(&actor, *run_id, from, step));
            from = step;
        }
        drafts.push(
            Draft::new(&actor, AuditAction::ResultReported, run_id).with(details([
                (detail::RESULT, json(&report.result)),
                (detail::TERMINAL_STATE, terminal.to_string()),
            ])),
        );
        drafts.push(Draft::transition(&actor, *run_id, from, terminal));
        if let Some(bundle) = &bundle {
            drafts.push(
                Draft::new(&actor, AuditAction::ArtifactStored, bundle.artifact_id).with(
                    details([
                        (detail::BUNDLE, json(bundle)),
                        (detail::RUN_ID, run_id.to_string()),
                    ]),
                ),
            );
        }
        if let Err(err) = self.commit(&mut inner, drafts) {
            if let Some(bundle) = &bundle {
                let _ = std::fs::remove_dir_all(self.artifact_path(&bundle.artifact_id));
            }
            return Err(err);
        }
        Ok(ResultAck {
            run_id: *run_id,
            state: terminal,
            artifact_id: bundle.map(|b| b.artifact_id),
        })
    }

    // ---- reads -------------------------------------------------------------

    pub fn get_status(&self, token: &str, run_id: &RunId) -> Result<TaskRun> {
        let mut inner = self.inner.lock();
        self.subject_of(&mut inner, token)?;
        inner
            .state
            .run(run_id)
            .cloned()
            .ok_or_else(|| BrokerError::UnknownRun(run_id.to_string()))
    }

    pub fn get_result(&self, token: &str, run_id: &RunId) -> Result<TaskResult> {
        let run = self.get_status(token, run_id)?;
        match run.result {
            Some(result) if run.state.is_terminal() => Ok(result),
            _ => Err(BrokerError::NotTerminal),
        }
    }

    pub fn list_runs(&self, token: &str, filter: &RunFilter) -> Result<Vec<TaskRun>> {
        let mut inner = self.inner.lock();
        self.subject_of(&mut inner, token)?;
        let mut runs: Vec<TaskRun> = inner
            .state
            .runs
            .values()
            .filter(|slot| {
                filter
                    .endpoint_id
                    .is_none_or(|e| slot.run.spec.endpoint_id == e)
                    && filter.state.is_none_or(|s| slot.run.state == s)
            })
            .map(|slot| slot.run.clone())
            .collect();
        runs.sort_by_key(|r| (r.submitted_at(), r.run_id));
        Ok(runs)
    }

    pub fn query_audit(&self, token: &str, filter: &AuditFilter) -> Result<Vec<AuditEvent>> {
        let mut inner = self.inner.lock();
        self.subject_of(&mut inner, token)?;
        Ok(inner
            .events
            .iter()
            .filter(|e| {
                filter.subject.as_ref().is_none_or(|s| &e.subject == s)
                    && filter.action.is_none_or(|a| e.action == a)
                    && filter.from_seq.is_none_or(|lo| e.seq >= lo)
                    && filter.to_seq.is_none_or(|hi| e.seq <= hi)
            })
            .cloned()
            .collect())
    }

    /// Every journaled event, without authentication (in-process use only).
    pub fn audit_log(&self) -> Vec<AuditEvent> {
        self.inner.lock().events.clone()
    }

    /// Copy of the live state (in-process use only).
    pub fn state(&self) -> BrokerState {
        self.inner.lock().state.clone()
    }

    // ---- artifacts ---------------------------------------------------------

    fn artifact_path(&self, id: &ArtifactId) -> PathBuf {
        self.dir.join(ARTIFACT_DIR).join(id.to_string())
    }

    fn store_artifacts(&self, run_id: RunId, uploads: &[FileUpload]) -> Result<ArtifactBundle> {
        let artifact_id = ArtifactId::new();
        let root = self.artifact_path(&artifact_id);
        let mut files = Vec::with_capacity(uploads.len());
        let outcome = (|| {
            for upload in uploads {
                let relative = sanitize_relative(&upload.relative_path)?;
                let bytes = B64.decode(&upload.content_b64).map_err(|e| {
                    BrokerError::InvalidReport(format!("{}: bad base64: {e}", upload.relative_path))
                })?;
                let target = root.join(&relative);
                if let Some(parent) = target.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                std::fs::write(&target, &bytes)?;
                files.push(ArtifactFile {
                    relative_path: upload.relative_path.clone(),
                    byte_size: bytes.len() as u64,
                    digest: secrets::sha256_hex(&bytes),
                });
            }
            Ok(())
        })();
        if let Err(err) = outcome {
            let _ = std::fs::remove_dir_all(&root);
            return Err(err);
        }
        Ok(ArtifactBundle {
            artifact_id,
            run_id,
            files,
            created_at: self.clock.now(),
            retention_days: self.config.retention_days.max(1),
            purged: false,
        })
    }

    pub fn get_artifact(&self, token: &str, id: &ArtifactId) -> Result<ArtifactContent> {
        let bundle = {
            let mut inner = self.inner.lock();
            self.subject_of(&mut inner, token)?;
            inner
                .state
                .artifacts
                .get(id)
                .cloned()
                .ok_or_else(|| BrokerError::UnknownArtifact(id.to_string()))?
        };
        if bundle.purged {
            return Err(BrokerError::ArtifactPurged(Box::new(bundle)));
        }
        let root = self.artifact_path(id);
        let mut files = Vec::with_capacity(bundle.files.len());
        for file in &bundle.files {
            let path = root.join(sanitize_relative(&file.relative_path)?);
            let bytes = match std::fs::read(&path) {
                Ok(bytes) => bytes,
                // Lost a race with the retention sweep.
                Err(err) if err.kind() == std::io::ErrorKind::NotFound => {
                    let purged = self.inner.lock().state.artifacts.get(id).cloned();
                    if let Some(b) = purged.filter(|b| b.purged) {
                        return Err(BrokerError::ArtifactPurged(Box::new(b)));
                    }
                    return Err(err.into());
                }
                Err(err) => return Err(err.into()),
            };
            files.push(FileUpload {
                relative_path: file.relative_path.clone(),
                content_b64: B64.encode(bytes),
            });
        }
        Ok(ArtifactContent { bundle, files })
    }

    /// Purges the content of every bundle older than its retention period.
    /// Metadata stays. Returns how many bundles were purged.
    pub fn sweep_retention(&self, now: Timestamp) -> Result<usize> {
        let mut inner = self.inner.lock();
        let due: Vec<(ArtifactId, i64)> = inner
            .state
            .artifacts
            .values()
            .filter(|b| !b.purged)
            .filter_map(|b| {
                let age = now.since(b.created_at);
                (age > b.retention_days as i64 * MILLIS_PER_DAY).then_some((b.artifact_id, age))
            })
            .collect();
        let drafts = due
            .iter()
            .map(|(id, age)| {
                Draft::new(SYSTEM_ACTOR, AuditAction::ArtifactPurged, id).with(details([(
                    "age_days",
                    format!("{:.3}", *age as f64 / MILLIS_PER_DAY as f64),
                )]))
            })
            .collect();
        self.commit(&mut inner, drafts)?;
        drop(inner);
        for (id, _) in &due {
            remove_dir_if_present(&self.artifact_path(id))?;
        }
        if !due.is_empty() {
            tracing::info!(purged = due.len(), "retention sweep");
        }
        Ok(due.len())
    }

    /// Drops expired tokens from memory. Their journal entries stay.
    pub fn prune_tokens(&self) -> usize {
        let now = self.clock.now();
        let mut inner = self.inner.lock();
        let before = inner.state.tokens.len();
        inner.state.tokens.retain(|_, grant| grant.expires_at > now);
        before - inner.state.tokens.len()
    }

    /// Removes artifact directories that are orphaned (crash before journaling)
    /// or belong to purged bundles (crash between purge event and deletion).
    fn tidy_artifacts(&self) -> Result<()> {
        let inner = self.inner.lock();
        for entry in std::fs::read_dir(self.dir.join(ARTIFACT_DIR))? {
            let entry = entry?;
            let keep = entry
                .file_name()
                .to_str()
                .and_then(|name| name.parse::<ArtifactId>().ok())
                .and_then(|id| inner.state.artifacts.get(&id))
                .is_some_and(|bundle| !bundle.purged);
            if !keep {
                tracing::warn!(path = %entry.path().display(), "removing unreferenced artifact directory");
                remove_dir_if_present(&entry.path())?;
            }
        }
        Ok(())
    }
}

fn remove_dir_if_present(path: &Path) -> Result<()> {
    match std::fs::remove_dir_all(path) {
        Ok(()) => Ok(()),
        Err(err) if err.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(err) => Err(err.into()),
    }
}

/// Accepts only plain relative paths (no root, no `..`).
fn sanitize_relative(path: &str) -> Result<PathBuf> {
    let candidate = Path::new(path);
    let mut clean = PathBuf::new();
    for component in candidate.components() {
        match component {
            Component::Normal(part) => clean.push(part),
            Component::CurDir => {}
            _ => {
                return Err(BrokerError::InvalidReport(format!(
                    "artifact path `{path}` must be relative without `..`"
                )))
            }
        }
    }
    if clean.as_os_str().is_empty() {
        return Err(BrokerError::InvalidReport("empty artifact path".into()));
    }
    Ok(clean)
}
