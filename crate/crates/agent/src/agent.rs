use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock, Weak};
use std::thread::JoinHandle;
use std::time::Duration;

use base64::Engine;
use ci_client::{AgentClient, ClientError};
use ci_protocol::api::{ClaimedTask, FileUpload, ResultReport};
use ci_protocol::policy::allow_list_permits;
use ci_protocol::{RunId, RunState, TaskResult};
use tokio::sync::Notify;

use crate::config::AgentConfig;
use crate::context::{running_as_root, ContextSettings, Job, UserEndpoints};
use crate::error::{AgentError, Result};
use crate::inflight::InflightStore;
use crate::runner::{run_task, TaskContext, TaskOutcome};

pub const BACKOFF_BASE: Duration = Duration::from_secs(1);
pub const BACKOFF_CAP: Duration = Duration::from_secs(60);
/// Files under `CI_ARTIFACT_OUT` beyond this total are left out of the bundle.
pub const ARTIFACT_LIMIT_BYTES: u64 = 32 << 20;

/// Exponential backoff: `base * 2^attempt`, capped.
pub fn backoff_delay(attempt: u32, base: Duration, cap: Duration) -> Duration {
    base.checked_mul(1u32.checked_shl(attempt).unwrap_or(u32::MAX))
        .unwrap_or(cap)
        .min(cap)
}

/// How the broker took a result report.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Delivery {
    Accepted,
    /// A 4xx answer; resending the same report cannot help.
    Refused(String),
    /// The agent is stopping; the report stays on disk for the next start.
    Deferred,
}

fn transient(e: &ClientError) -> bool {
    match e {
        ClientError::Unreachable(_) | ClientError::Decode(_) => true,
        ClientError::Api { status, .. } => *status >= 500,
    }
}

struct Inner {
    config: AgentConfig,
    client: AgentClient,
    inflight: InflightStore,
    endpoints: OnceLock<UserEndpoints>,
    runtime: tokio::runtime::Handle,
    stopping: AtomicBool,
    wake: Notify,
    backoff_base: Duration,
}

/// Stops a running agent from another thread.
#[derive(Clone)]
pub struct StopHandle(Arc<Inner>);

impl StopHandle {
    pub fn stop(&self) {
        self.0.stopping.store(true, Ordering::Release);
        self.0.wake.notify_waiters();
    }
}

/// The site agent: one outbound poll loop feeding per-user worker pools.
pub struct Agent {
    inner: Arc<Inner>,
    runtime: tokio::runtime::Runtime,
}

impl Agent {
    pub fn new(config: AgentConfig) -> Result<Self> {
        Self::with_backoff_base(config, BACKOFF_BASE)
    }

    /// Like [`Agent::new`] with a shorter first retry delay, for tests.
    pub fn with_backoff_base(config: AgentConfig, backoff_base: Duration) -> Result<Self> {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .thread_name("agent-io")
            .enable_all()
            .build()?;
        let timeout = Duration::from_secs(config.long_poll_seconds as u64 + 30);
        let client = AgentClient::new(&config.broker_url, config.endpoint_id, &config.agent_key, timeout)?;
        let inflight = InflightStore::open(&config.state_dir)?;
        let settings = ContextSettings {
            workspace_root: config.template.workspace_root.clone(),
            state_dir: config.state_dir.clone(),
            provider: config.provider_spec(),
            pilot_idle_ttl: Duration::from_secs_f64(config.template.pilot_idle_ttl_seconds),
            status_interval: Duration::from_millis(200),
            accounts: config.identity_map.accounts().into_iter().map(String::from).collect(),
            switch_user: running_as_root(),
            allow_list: config.allow_list.clone(),
            provenance_tools: config.provenance_tools.clone(),
            network: config.template.task_network,
        };
        let inner = Arc::new(Inner {
            config,
            client,
            inflight,
            endpoints: OnceLock::new(),
            runtime: runtime.handle().clone(),
            stopping: AtomicBool::new(false),
            wake: Notify::new(),
            backoff_base,
        });
        let weak = Arc::downgrade(&inner);
        let exec = {
            let weak = weak.clone();
            Arc::new(move |job: Job| {
                if let Some(inner) = weak.upgrade() {
                    inner.execute(job);
                }
            })
        };
        let on_failure = Arc::new(move |job: Job, err: &ci_providers::ProviderError| {
            if let Some(inner) = Weak::upgrade(&weak) {
                let result = TaskResult::aborted("provision_failure", err.to_string());
                inner.finish_blocking(job.run_id, failed(result, Vec::new()));
            }
        });
        let _ = inner.endpoints.set(UserEndpoints::new(settings, exec, on_failure));
        Ok(Agent { inner, runtime })
    }

    pub fn stop_handle(&self) -> StopHandle {
        StopHandle(self.inner.clone())
    }

    pub fn endpoints(&self) -> &UserEndpoints {
        self.inner.endpoints()
    }

    /// Runs until stopped or the broker rejects the agent key. On the way out
    /// the worker pools finish the tasks they are running.
    pub fn run(self) -> Result<()> {
        let inner = self.inner.clone();
        let outcome = self.runtime.block_on(inner.clone().poll_loop());
        inner.stopping.store(true, Ordering::Release);
        inner.endpoints().shutdown();
        self.runtime.shutdown_timeout(Duration::from_secs(5));
        outcome
    }

    /// Starts the agent on its own thread.
    pub fn spawn(self) -> RunningAgent {
        let stop = self.stop_handle();
        let inner = self.inner.clone();
        let thread = std::thread::Builder::new()
            .name("agent".into())
            .spawn(move || self.run())
            .expect("spawn agent thread");
        RunningAgent { stop, inner, thread: Some(thread) }
    }
}

/// An agent running on a background thread.
pub struct RunningAgent {
    stop: StopHandle,
    inner: Arc<Inner>,
    thread: Option<JoinHandle<Result<()>>>,
}

impl RunningAgent {
    pub fn endpoints(&self) -> &UserEndpoints {
        self.inner.endpoints()
    }

    pub fn is_finished(&self) -> bool {
        self.thread.as_ref().is_none_or(|t| t.is_finished())
    }

    /// Stops the loop and waits for it and the worker pools.
    pub fn stop(mut self) -> Result<()> {
        self.stop.stop();
        self.join()
    }

    /// Waits for the agent to exit on its own.
    pub fn join(&mut self) -> Result<()> {
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(AgentError::Io(std::io::Error::other("agent thread panicked")))),
            None => Ok(()),
        }
    }
}

impl Drop for RunningAgent {
    fn drop(&mut self) {
        self.stop.stop();
        let _ = self.join();
    }
}

fn failed(result: TaskResult, artifact_files: Vec<FileUpload>) -> ResultReport {
    ResultReport {
        terminal_state: RunState::Failed,
        result,
        artifact_files,
    }
}

fn upload(relative_path: &str, bytes: &[u8]) -> FileUpload {
    FileUpload {
        relative_path: relative_path.to_string(),
        content_b64: base64::engine::general_purpose::STANDARD.encode(bytes),
    }
}

/// stdout.txt, stderr.txt, provenance.json, then regular files written under
/// the task's artifact directory as `out/<path>`, up to the size limit.
fn collect_artifacts(outcome: &TaskOutcome) -> Vec<FileUpload> {
    let result = &outcome.result;
    let mut files = vec![
        upload("stdout.txt", result.stdout.as_bytes()),
        upload("stderr.txt", result.stderr.as_bytes()),
    ];
    if let Some(p) = &result.provenance {
        let json = serde_json::to_vec_pretty(p).unwrap_or_default();
        files.push(upload("provenance.json", &json));
    }
    let out = outcome.artifact_dir();
    let mut budget = ARTIFACT_LIMIT_BYTES;
    let mut entries: Vec<_> = walkdir::WalkDir::new(&out)
        .follow_links(false)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .collect();
    entries.sort_by(|a, b| a.path().cmp(b.path()));
    for entry in entries {
        let Ok(rel) = entry.path().strip_prefix(&out) else { continue };
        let size = entry.metadata().map(|m| m.len()).unwrap_or(u64::MAX);
        if size > budget {
            tracing::warn!(file = %rel.display(), "artifact skipped: bundle size limit reached");
            continue;
        }
        if let Ok(bytes) = std::fs::read(entry.path()) {
            budget -= bytes.len() as u64;
            files.push(upload(&Path::new("out").join(rel).to_string_lossy(), &bytes));
        }
    }
    files
}

impl Inner {
    fn endpoints(&self) -> &UserEndpoints {
        self.endpoints.get().expect("set in Agent::new")
    }

    fn stopping(&self) -> bool {
        self.stopping.load(Ordering::Acquire)
    }

    /// Sleeps for `d` unless the agent is told to stop first.
    async fn pause(&self, d: Duration) {
        let woken = self.wake.notified();
        tokio::pin!(woken);
        woken.as_mut().enable();
        if self.stopping() {
            return;
        }
        let _ = tokio::time::timeout(d, woken).await;
    }

    async fn poll_loop(self: Arc<Self>) -> Result<()> {
        self.recover().await?;
        let mut failures = 0u32;
        while !self.stopping() {
            let wait = self.config.long_poll_seconds;
            match self.client.poll(self.config.claim_batch, wait).await {
                Ok(tasks) => {
                    if failures > 0 {
                        tracing::info!("broker reachable again");
                    }
                    failures = 0;
                    let idle = tasks.is_empty();
                    for task in tasks {
                        self.clone().dispatch(task);
                    }
                    if idle && wait == 0 {
                        self.pause(self.config.poll_interval).await;
                    }
                }
                Err(e) if e.code() == "invalid_agent_key" => {
                    tracing::error!("{}", AgentError::InvalidAgentKey);
                    return Err(AgentError::InvalidAgentKey);
                }
                Err(e) => {
                    let delay = backoff_delay(failures, self.backoff_base, BACKOFF_CAP);
                    tracing::warn!(error = %e, retry_in = ?delay, "poll failed");
                    failures = failures.saturating_add(1);
                    self.pause(delay).await;
                }
            }
        }
        Ok(())
    }

    /// Runs left in flight by a previous process: finished ones have their
    /// stored report resent, the rest are reported as interrupted and never
    /// run again.
    async fn recover(self: &Arc<Self>) -> Result<()> {
        for record in self.inflight.pending()? {
            let report = match record.report {
                Some(report) => report,
                None => {
                    let report = failed(
                        TaskResult::aborted("agent_restart", "the agent restarted while this run was in progress"),
                        Vec::new(),
                    );
                    self.inflight.finish(record.run_id, &report)?;
                    report
                }
            };
            tracing::info!(run = %record.run_id, "reporting run left over from a previous start");
            let inner = self.clone();
            tokio::spawn(async move { inner.deliver(record.run_id, report).await });
        }
        Ok(())
    }

    /// Routes one claimed task to its user's pool, or reports why it cannot run.
    fn dispatch(self: Arc<Self>, task: ClaimedTask) {
        let run_id = task.run_id;
        if let Err(e) = self.inflight.begin(run_id) {
            tracing::error!(run = %run_id, error = %e, "cannot record claimed run");
        }
        let refuse = |reason: &str, message: String| {
            let report = failed(TaskResult::aborted(reason, message), Vec::new());
            let inner = self.clone();
            self.runtime.spawn(async move {
                if let Err(e) = inner.inflight.finish(run_id, &report) {
                    tracing::error!(run = %run_id, error = %e, "cannot persist result");
                }
                inner.deliver(run_id, report).await
            });
        };
        if !allow_list_permits(&self.config.allow_list, &task.spec) {
            return refuse("function_not_allowed", "task refused by the endpoint allow-list".into());
        }
        let account = match self.config.identity_map.map_identity(&task.spec.requested_by) {
            Ok(a) => a.to_string(),
            Err(e) => return refuse("unmapped_identity", e.to_string()),
        };
        let ctx = match self.endpoints().ensure_user_endpoint(&account) {
            Ok(ctx) => ctx,
            Err(e) => return refuse("workspace_creation_failure", e.to_string()),
        };
        let job = Job {
            run_id,
            spec: task.spec,
            payload: task.payload,
            account,
            workspace: ctx.workspace.clone(),
            run_as: ctx.run_as,
        };
        tracing::info!(run = %run_id, account = %job.account, "queued");
        if ctx.enqueue(job).is_err() {
            refuse("agent_restart", "the agent is shutting down".into());
        }
    }

    /// Worker side: runs the job, persists the report, then delivers it.
    fn execute(self: &Arc<Self>, job: Job) {
        let run_id = job.run_id;
        let mark = |state: RunState| {
            if let Err(e) = self.runtime.block_on(self.client.report_state(&run_id, state)) {
                tracing::warn!(run = %run_id, %state, error = %e, "progress marker not delivered");
            }
        };
        mark(RunState::Staging);
        let ctx = TaskContext {
            run_id,
            workspace: &job.workspace,
            allow_list: &self.config.allow_list,
            payload: job.payload.as_deref(),
            provenance_tools: &self.config.provenance_tools,
            network: self.config.template.task_network,
            run_as: job.run_as,
        };
        let outcome = run_task(&job.spec, &ctx, || mark(RunState::Running));
        let succeeded = outcome.result.exit_code == 0 && outcome.result.failure_reason.is_none();
        let report = ResultReport {
            terminal_state: if succeeded { RunState::Completed } else { RunState::Failed },
            artifact_files: collect_artifacts(&outcome),
            result: outcome.result.clone(),
        };
        if let Err(e) = std::fs::remove_dir_all(&outcome.run_dir) {
            if e.kind() != std::io::ErrorKind::NotFound {
                tracing::warn!(run = %run_id, error = %e, "cannot remove run directory");
            }
        }
        self.finish_blocking(run_id, report);
    }

    fn finish_blocking(self: &Arc<Self>, run_id: RunId, report: ResultReport) {
        if let Err(e) = self.inflight.finish(run_id, &report) {
            tracing::error!(run = %run_id, error = %e, "cannot persist result");
        }
        self.runtime.block_on(self.deliver(run_id, report));
    }

    /// Sends a result until the broker answers definitively or the agent stops.
    async fn deliver(&self, run_id: RunId, report: ResultReport) -> Delivery {
        let mut attempt = 0;
        let delivery = loop {
            match self.client.report_result(&run_id, &report).await {
                Ok(ack) => {
                    tracing::info!(run = %run_id, state = %ack.state, "result accepted");
                    break Delivery::Accepted;
                }
                Err(e) if transient(&e) => {
                    if self.stopping() {
                        return Delivery::Deferred;
                    }
                    let delay = backoff_delay(attempt, self.backoff_base, BACKOFF_CAP);
                    tracing::warn!(run = %run_id, error = %e, retry_in = ?delay, "result not delivered");
                    attempt += 1;
                    self.pause(delay).await;
                }
                Err(e) => {
                    tracing::error!(run = %run_id, error = %e, "broker refused result");
                    break Delivery::Refused(e.to_string());
                }
            }
        };
        if let Err(e) = self.inflight.clear(&run_id) {
            tracing::warn!(run = %run_id, error = %e, "cannot clear in-flight record");
        }
        delivery
    }
}
