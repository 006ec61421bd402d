use std::future::Future;
use std::io::Write;
use std::path::Path;
use std::time::Duration;

use ci_client::{ClientError, UserClient};
use ci_protocol::{encode, RunId, RunState, TaskResult, TaskRun};
use rand::Rng;
use tokio::time::Instant;

use crate::error::AdapterError;
use crate::inputs::{Site, StepInputs};
use crate::publish::{publish_artifacts, Fetched};
use crate::report::{test_entries, Report, SiteReport, COMPARISON_FILE, REPORT_FILE};

const RETRY_CAP: Duration = Duration::from_secs(30);

/// How a site run ended from the CI step's point of view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Completed,
    /// Terminal but not completed: failed, rejected or expired.
    Unsuccessful(RunState),
    ApprovalTimeout,
    DeadlineExceeded,
    /// The broker refused a request; carries its error code.
    Refused(String),
    AuthFailure,
    Unreachable,
    InvalidInput,
    DigestMismatch,
    /// Local failure such as an unwritable artifact directory.
    LocalError,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        match self {
            Outcome::Completed => 0,
            Outcome::AuthFailure => 2,
            Outcome::Unreachable => 3,
            _ => 1,
        }
    }

    pub fn reason(&self) -> String {
        match self {
            Outcome::Completed => "completed".into(),
            Outcome::Unsuccessful(RunState::Failed) => "run_failed".into(),
            Outcome::Unsuccessful(state) => state.to_string(),
            Outcome::ApprovalTimeout => "approval_timeout".into(),
            Outcome::DeadlineExceeded => "deadline_exceeded".into(),
            Outcome::Refused(code) => code.clone(),
            Outcome::AuthFailure => "auth_failure".into(),
            Outcome::Unreachable => "unreachable".into(),
            Outcome::InvalidInput => "invalid_input".into(),
            Outcome::DigestMismatch => "digest_mismatch".into(),
            Outcome::LocalError => "local_error".into(),
        }
    }

    fn from_client(err: &ClientError) -> Self {
        if err.is_auth() {
            Outcome::AuthFailure
        } else if transient(err) {
            Outcome::Unreachable
        } else {
            Outcome::Refused(err.code().to_string())
        }
    }

    fn from_adapter(err: &AdapterError) -> Self {
        match err {
            AdapterError::InvalidInput(_) => Outcome::InvalidInput,
            AdapterError::DigestMismatch { .. } => Outcome::DigestMismatch,
            AdapterError::Io { .. } => Outcome::LocalError,
            AdapterError::Client(e) => Outcome::from_client(e),
        }
    }
}

/// Everything known about one site after the step finished.
#[derive(Debug, Clone)]
pub struct SiteRun {
    pub label: String,
    pub outcome: Outcome,
    /// Human-readable detail for non-completed outcomes.
    pub detail: Option<String>,
    pub run: Option<TaskRun>,
    /// stdout and stderr with the client secret masked.
    pub stdout: String,
    pub stderr: String,
}

impl SiteRun {
    fn early(site: &Site, outcome: Outcome, detail: String) -> Self {
        SiteRun {
            label: site.label.clone(),
            outcome,
            detail: Some(detail),
            run: None,
            stdout: String::new(),
            stderr: String::new(),
        }
    }

    pub fn run_id(&self) -> Option<RunId> {
        self.run.as_ref().map(|r| r.run_id)
    }

    pub fn result(&self) -> Option<&TaskResult> {
        self.run.as_ref().and_then(|r| r.result.as_ref())
    }

    pub fn report(&self) -> SiteReport {
        let result = self.result();
        SiteReport {
            label: self.label.clone(),
            run_id: self.run_id(),
            state: self.run.as_ref().map(|r| r.state),
            exit_code: result.map(|r| r.exit_code),
            duration_seconds: result.map_or(0.0, |r| r.duration_seconds.max(0.0)),
            tests: test_entries(&self.stdout),
            outcome: self.outcome.reason(),
        }
    }

    /// `ci-run: outcome=<reason> state=<state> exit_code=<n> run_id=<id> label=<label>`,
    /// plus a quoted `detail` when there is one.
    pub fn reason_line(&self) -> String {
        let dash = || "-".to_string();
        let mut line = format!(
            "ci-run: outcome={} state={} exit_code={} run_id={} label={}",
            self.outcome.reason(),
            self.run.as_ref().map_or_else(dash, |r| r.state.to_string()),
            self.result().map_or_else(dash, |r| r.exit_code.to_string()),
            self.run_id().map_or_else(dash, |r| r.to_string()),
            self.label,
        );
        if let Some(detail) = &self.detail {
            line += &format!(" detail={detail:?}");
        }
        line
    }
}

fn transient(err: &ClientError) -> bool {
    match err {
        ClientError::Unreachable(_) => true,
        ClientError::Api { status, .. } => *status >= 500,
        ClientError::Decode(_) => false,
    }
}

/// Runs `call` until it succeeds, fails permanently, or has failed
/// transiently `max_retries + 1` times in a row.
async fn retrying<T, F, Fut>(inputs: &StepInputs, mut call: F) -> Result<T, ClientError>
where
    F: FnMut() -> Fut,
    Fut: Future<Output = Result<T, ClientError>>,
{
    let mut attempt = 0u32;
    loop {
        match call().await {
            Err(e) if transient(&e) && attempt < inputs.max_retries => {
                let delay = inputs.retry_base.saturating_mul(1 << attempt.min(16)).min(RETRY_CAP);
                tokio::time::sleep(delay).await;
                attempt += 1;
            }
            other => return other,
        }
    }
}

fn jittered(interval: Duration) -> Duration {
    interval.mul_f64(rand::rng().random_range(0.8..1.2))
}

pub(crate) fn client_for(inputs: &StepInputs) -> Result<UserClient, ClientError> {
    UserClient::new(
        &inputs.broker_url,
        &inputs.credentials.client_id,
        inputs.credentials.client_secret.expose(),
    )
}

/// Submits the work to one site, waits for a terminal state or the local
/// deadline, and writes the site's files into `dir`.
pub(crate) async fn run_site(client: &UserClient, inputs: &StepInputs, site: &Site, dir: &Path) -> SiteRun {
    let secret = &inputs.credentials.client_secret;
    if let Err(e) = retrying(inputs, || client.login()).await {
        return SiteRun::early(site, Outcome::from_client(&e), secret.scrub(&e.to_string()));
    }
    let spec = inputs.spec_for(site);
    let submitted = match retrying(inputs, || client.submit_task(&spec)).await {
        Ok(s) => s,
        Err(e) => return SiteRun::early(site, Outcome::from_client(&e), secret.scrub(&e.to_string())),
    };
    let deadline = Instant::now() + inputs.deadline;
    let mut run = loop {
        let run = match retrying(inputs, || client.get_status(&submitted.run_id)).await {
            Ok(r) => r,
            Err(e) => {
                let mut out = SiteRun::early(site, Outcome::from_client(&e), secret.scrub(&e.to_string()));
                out.detail = Some(format!("run {}: {}", submitted.run_id, out.detail.unwrap_or_default()));
                return out;
            }
        };
        if run.state.is_terminal() {
            break run;
        }
        if Instant::now() >= deadline {
            let outcome = if run.state == RunState::PendingApproval {
                Outcome::ApprovalTimeout
            } else {
                Outcome::DeadlineExceeded
            };
            let detail = format!("still {} after {:?}", run.state, inputs.deadline);
            let mut out = SiteRun::early(site, outcome, detail);
            out.run = Some(run);
            return out;
        }
        tokio::time::sleep(jittered(inputs.poll_interval).min(deadline - Instant::now())).await;
    };
    if let Some(result) = run.result.as_mut() {
        result.stdout = secret.scrub(&result.stdout);
        result.stderr = secret.scrub(&result.stderr);
    }
    let mut out = SiteRun {
        label: site.label.clone(),
        outcome: match run.state {
            RunState::Completed => Outcome::Completed,
            state => Outcome::Unsuccessful(state),
        },
        detail: run.result.as_ref().and_then(|r| r.failure_reason.clone()),
        stdout: run.result.as_ref().map(|r| r.stdout.clone()).unwrap_or_default(),
        stderr: run.result.as_ref().map(|r| r.stderr.clone()).unwrap_or_default(),
        run: Some(run),
    };
    if let Err(e) = save_site(client, inputs, &out, dir).await {
        // a run that failed remotely keeps that as its outcome
        if out.outcome == Outcome::Completed {
            out.outcome = Outcome::from_adapter(&e);
        }
        out.detail = Some(secret.scrub(&e.to_string()));
    }
    out
}

async fn save_site(client: &UserClient, inputs: &StepInputs, site: &SiteRun, dir: &Path) -> Result<(), AdapterError> {
    std::fs::create_dir_all(dir).map_err(AdapterError::io(dir))?;
    let write = |name: &str, bytes: &[u8]| {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(AdapterError::io(&path))
    };
    let Some(run) = &site.run else { return Ok(()) };
    write("run.json", &encode(run))?;
    write("stdout.txt", site.stdout.as_bytes())?;
    write("stderr.txt", site.stderr.as_bytes())?;
    if let Some(result) = &run.result {
        write("result.json", &encode(result))?;
        if let Some(p) = &result.provenance {
            write("provenance.json", &encode(p))?;
        }
    }
    let Some(artifact_id) = run.artifact_id else { return Ok(()) };
    let fetched = match retrying(inputs, || client.get_artifact(&artifact_id)).await {
        Ok(content) => Fetched::Content(content),
        Err(ClientError::Api { code, bundle: Some(bundle), .. }) if code == "artifact_purged" => Fetched::Purged(bundle),
        Err(e) => return Err(e.into()),
    };
    publish_artifacts(dir, &fetched)?;
    Ok(())
}

/// Writes `report.json` and `comparison.csv` into `dir`.
pub(crate) fn write_reports(dir: &Path, report: &Report) -> Result<(), AdapterError> {
    std::fs::create_dir_all(dir).map_err(AdapterError::io(dir))?;
    report.write_json(&dir.join(REPORT_FILE))?;
    report.write_comparison_csv(&dir.join(COMPARISON_FILE))
}

/// Result of a CI step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub exit_code: i32,
    pub site: SiteRun,
}

/// Runs the work on the single site in `inputs`. The remote stdout and
/// stderr are relayed verbatim to `out` and `err`, followed by the reason
/// line on `err` (on a new line if the relayed stderr lacks a final newline). Exit code: 0 completed, 1 any other run outcome or bad
/// input, 2 authentication failure, 3 broker unreachable.
pub async fn run_step(inputs: &StepInputs, out: &mut dyn Write, err: &mut dyn Write) -> StepOutput {
    let placeholder = Site {
        label: inputs.sites.first().map_or_else(|| "-".into(), |s| s.label.clone()),
        endpoint_id: inputs.sites.first().map(|s| s.endpoint_id).unwrap_or_default(),
    };
    let checked = inputs.validate().and_then(|()| match inputs.sites.len() {
        1 => Ok(()),
        n => Err(AdapterError::InvalidInput(format!("a single step takes one endpoint, got {n}"))),
    });
    let site = match checked.map_err(|e| e.to_string()).and_then(|()| client_for(inputs).map_err(|e| e.to_string())) {
        Err(msg) => SiteRun::early(&placeholder, Outcome::InvalidInput, msg),
        Ok(client) => {
            let site = run_site(&client, inputs, &inputs.sites[0], &inputs.artifact_dir).await;
            let _ = out.write_all(site.stdout.as_bytes());
            let _ = err.write_all(site.stderr.as_bytes());
            if !site.stderr.is_empty() && !site.stderr.ends_with('\n') {
                // keeps the reason line on a line of its own
                let _ = err.write_all(b"\n");
            }
            let report = Report { sites: vec![site.report()] };
            match write_reports(&inputs.artifact_dir, &report) {
                Err(e) if site.outcome == Outcome::Completed => SiteRun {
                    outcome: Outcome::LocalError,
                    detail: Some(e.to_string()),
                    ..site
                },
                _ => site,
            }
        }
    };
    let _ = out.flush();
    let _ = writeln!(err, "{}", site.reason_line());
    let _ = err.flush();
    StepOutput {
        exit_code: site.outcome.exit_code(),
        site,
    }
}
