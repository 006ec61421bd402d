use std::path::{Path, PathBuf};
use std::time::Duration;

use ci_protocol::{EndpointId, FunctionId, RepoRef, TaskSpec};

use crate::error::{AdapterError, Result};

pub const CLIENT_ID_ENV: &str = "CI_CLIENT_ID";
pub const CLIENT_SECRET_ENV: &str = "CI_CLIENT_SECRET";
pub const BROKER_URL_ENV: &str = "CI_BROKER_URL";
pub const REPO_URL_ENV: &str = "CI_REPO_URL";
pub const REPO_REF_ENV: &str = "CI_REPO_REF";

pub const DEFAULT_TIMEOUT_SECONDS: u64 = 3600;
/// Added to the task timeout to get the local deadline.
pub const DEADLINE_SLACK: Duration = Duration::from_secs(120);
pub const POLL_INTERVAL: Duration = Duration::from_secs(1);
pub const DEFAULT_FAN_OUT: usize = 3;

/// A client secret. Never printed: `Debug` is redacted.
#[derive(Clone, PartialEq, Eq)]
pub struct Secret(String);

impl Secret {
    pub fn new(value: impl Into<String>) -> Self {
        Secret(value.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }

    /// Reads the first line of a file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(AdapterError::io(path))?;
        let value = text.lines().next().unwrap_or("").trim().to_string();
        if value.is_empty() {
            return Err(AdapterError::InvalidInput(format!("{} holds no secret", path.display())));
        }
        Ok(Secret(value))
    }

    /// Replaces every occurrence of the secret in `text`.
    pub fn scrub(&self, text: &str) -> String {
        if self.0.len() < 4 {
            return text.to_string();
        }
        text.replace(&self.0, "***")
    }
}

impl std::fmt::Debug for Secret {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Secret(***)")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Credentials {
    pub client_id: String,
    pub client_secret: Secret,
}

impl Credentials {
    /// `CI_CLIENT_ID` / `CI_CLIENT_SECRET`, or the secret from `secret_file`.
    /// An explicit client id wins over the environment.
    pub fn resolve(client_id: Option<String>, secret_file: Option<&Path>, env: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let client_id = client_id
            .or_else(|| env(CLIENT_ID_ENV))
            .filter(|s| !s.trim().is_empty())
            .ok_or_else(|| AdapterError::InvalidInput(format!("{CLIENT_ID_ENV} is not set")))?;
        let client_secret = match secret_file {
            Some(path) => Secret::from_file(path)?,
            None => env(CLIENT_SECRET_ENV)
                .filter(|s| !s.is_empty())
                .map(Secret)
                .ok_or_else(|| {
                    AdapterError::InvalidInput(format!("{CLIENT_SECRET_ENV} is not set and no secret file given"))
                })?,
        };
        Ok(Credentials { client_id, client_secret })
    }
}

/// What to run: a shell command or a registered function.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Work {
    Shell(String),
    Function(FunctionId),
}

/// One labelled target endpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Site {
    pub label: String,
    pub endpoint_id: EndpointId,
}

/// Parses a matrix file: one `label endpoint_id` pair per line, `#` comments.
pub fn parse_matrix(text: &str) -> Result<Vec<Site>> {
    let mut sites: Vec<Site> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |m: String| AdapterError::InvalidInput(format!("matrix line {}: {m}", n + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [label, id] = fields[..] else {
            return Err(bad(format!("expected `label endpoint_id`, got `{line}`")));
        };
        let endpoint_id = id.parse().map_err(|_| bad(format!("`{id}` is not an endpoint id")))?;
        if sites.iter().any(|s| s.label == label) {
            return Err(bad(format!("duplicate label `{label}`")));
        }
        sites.push(Site {
            label: label.to_string(),
            endpoint_id,
        });
    }
    if sites.is_empty() {
        return Err(AdapterError::InvalidInput("matrix lists no endpoints".into()));
    }
    Ok(sites)
}

/// Everything one CI step needs.
#[derive(Debug, Clone)]
pub struct StepInputs {
    pub broker_url: String,
    pub credentials: Credentials,
    pub sites: Vec<Site>,
    pub work: Work,
    pub args: Vec<String>,
    pub repo: Option<RepoRef>,
    pub timeout_seconds: u64,
    pub artifact_dir: PathBuf,
    /// How long to wait for a terminal state. Defaults to timeout + 120 s.
    pub deadline: Duration,
    pub poll_interval: Duration,
    pub fan_out: usize,
    /// Consecutive unreachable-broker failures tolerated before giving up.
    pub max_retries: u32,
    /// First retry delay; doubles per attempt up to 30 s.
    pub retry_base: Duration,
}

impl StepInputs {
    pub fn new(broker_url: &str, credentials: Credentials, sites: Vec<Site>, work: Work) -> Self {
        StepInputs {
            broker_url: broker_url.to_string(),
            credentials,
            sites,
            work,
            args: Vec::new(),
            repo: None,
            timeout_seconds: DEFAULT_TIMEOUT_SECONDS,
            artifact_dir: PathBuf::from("ci-artifacts"),
            deadline: Duration::from_secs(DEFAULT_TIMEOUT_SECONDS) + DEADLINE_SLACK,
            poll_interval: POLL_INTERVAL,
            fan_out: DEFAULT_FAN_OUT,
            max_retries: 5,
            retry_base: Duration::from_secs(1),
        }
    }

    /// Sets the task timeout and the matching default deadline.
    pub fn with_timeout(mut self, seconds: u64) -> Self {
        self.timeout_seconds = seconds;
        self.deadline = Duration::from_secs(seconds) + DEADLINE_SLACK;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.sites.is_empty() {
            return Err(AdapterError::InvalidInput("no endpoint given".into()));
        }
        if matches!(&self.work, Work::Shell(cmd) if cmd.trim().is_empty()) {
            return Err(AdapterError::InvalidInput("shell command is empty".into()));
        }
        if self.timeout_seconds == 0 {
            return Err(AdapterError::InvalidInput("timeout must be positive".into()));
        }
        if self.fan_out == 0 {
            return Err(AdapterError::InvalidInput("fan-out must be at least 1".into()));
        }
        for site in &self.sites {
            let ok = !site.label.is_empty()
                && !site.label.starts_with('.')
                && site.label.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c));
            if !ok {
                return Err(AdapterError::InvalidInput(format!(
                    "site label `{}` must be letters, digits, '.', '_' or '-'",
                    site.label
                )));
            }
        }
        if let Some(repo) = &self.repo {
            if repo.url.is_empty() || repo.git_ref.is_empty() {
                return Err(AdapterError::InvalidInput("repository url and ref must both be set".into()));
            }
        }
        Ok(())
    }

    pub fn spec_for(&self, site: &Site) -> TaskSpec {
        let mut spec = match &self.work {
            Work::Shell(cmd) => TaskSpec::shell(site.endpoint_id, cmd.clone()),
            Work::Function(id) => TaskSpec::function(site.endpoint_id, *id),
        };
        spec.args = self.args.clone();
        spec.repo = self.repo.clone();
        spec.timeout_seconds = self.timeout_seconds;
        spec
    }
}
