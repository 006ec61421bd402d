use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Duration;

use ci_protocol::{EndpointId, FunctionId, ProviderKind};
use ci_providers::{BatchSpec, ProviderSpec};
use serde::Deserialize;

use crate::error::{AgentError, Result};
use crate::identity::IdentityMap;

/// Network policy applied to task processes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskNetwork {
    #[default]
    Open,
    /// Compute nodes without outbound access: task processes get proxy and
    /// git settings that make network fetches fail. Staging still happens
    /// agent-side with the agent's own network.
    None,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchTemplates {
    pub submit_cmd_template: String,
    pub status_cmd_template: String,
    pub cancel_cmd_template: String,
    #[serde(default)]
    pub directive_prefix: Option<String>,
    #[serde(default)]
    pub job_id_regex: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateConfig {
    pub provider_kind: ProviderKind,
    pub pilot_size: u32,
    pub workspace_root: PathBuf,
    #[serde(default)]
    pub batch_directives: BTreeMap<String, String>,
    #[serde(default)]
    pub batch: Option<BatchTemplates>,
    #[serde(default = "default_idle_ttl")]
    pub pilot_idle_ttl_seconds: f64,
    #[serde(default)]
    pub task_network: TaskNetwork,
}

fn default_idle_ttl() -> f64 {
    300.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    broker_url: String,
    endpoint_id: EndpointId,
    #[serde(default)]
    agent_key_file: Option<PathBuf>,
    identity_map_file: PathBuf,
    #[serde(default = "default_poll_interval")]
    poll_interval_seconds: f64,
    #[serde(default = "default_long_poll")]
    long_poll_seconds: u32,
    #[serde(default = "default_claim_batch")]
    claim_batch: u32,
    #[serde(default)]
    state_dir: Option<PathBuf>,
    #[serde(default)]
    allow_list: BTreeSet<FunctionId>,
    #[serde(default = "default_tools")]
    provenance_tools: Vec<String>,
    template: TemplateConfig,
}

fn default_poll_interval() -> f64 {
    2.0
}

fn default_long_poll() -> u32 {
    20
}

fn default_claim_batch() -> u32 {
    4
}

fn default_tools() -> Vec<String> {
    vec!["git".into(), "pytest".into()]
}

/// Validated agent configuration.
#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub broker_url: String,
    pub endpoint_id: EndpointId,
    pub agent_key: String,
    pub identity_map: IdentityMap,
    pub poll_interval: Duration,
    /// Long-poll wait requested from the broker; 0 means plain polling.
    pub long_poll_seconds: u32,
    pub claim_batch: u32,
    /// In-flight records and pilot scripts. Defaults to `<workspace_root>/.agent`.
    pub state_dir: PathBuf,
    /// Local copy of the endpoint's allow-list, re-checked before execution.
    pub allow_list: BTreeSet<FunctionId>,
    pub provenance_tools: Vec<String>,
    pub template: TemplateConfig,
}

pub const AGENT_KEY_ENV: &str = "AGENT_KEY";

impl AgentConfig {
    /// Reads the TOML file, the identity map and the agent key. The `AGENT_KEY`
    /// environment variable, when set, wins over `agent_key_file`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AgentError::config(path, e.to_string()))?;
        let env_key = std::env::var(AGENT_KEY_ENV).ok().filter(|k| !k.trim().is_empty());
        Self::from_toml(&text, path, env_key)
    }

    /// Relative paths in the file resolve against the file's directory.
    pub fn from_toml(text: &str, origin: &Path, env_key: Option<String>) -> Result<Self> {
        let file: FileConfig = toml::from_str(text).map_err(|e| AgentError::config(origin, e.to_string()))?;
        let base = origin.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };

        let agent_key = match (env_key, &file.agent_key_file) {
            (Some(key), _) => key.trim().to_string(),
            (None, Some(key_file)) => {
                let key_path = resolve(key_file);
                std::fs::read_to_string(&key_path)
                    .map_err(|e| AgentError::config(&key_path, e.to_string()))?
                    .trim()
                    .to_string()
            }
            (None, None) => {
                return Err(AgentError::config(origin, "agent_key_file missing and AGENT_KEY unset"))
            }
        };
        if agent_key.is_empty() {
            return Err(AgentError::config(origin, "agent key is empty"));
        }
        if !(file.poll_interval_seconds.is_finite() && file.poll_interval_seconds > 0.0) {
            return Err(AgentError::config(origin, "poll_interval_seconds must be positive"));
        }
        if file.claim_batch == 0 {
            return Err(AgentError::config(origin, "claim_batch must be at least 1"));
        }
        let mut template = file.template;
        template.workspace_root = resolve(&template.workspace_root);
        if !(template.pilot_idle_ttl_seconds.is_finite() && template.pilot_idle_ttl_seconds >= 0.0) {
            return Err(AgentError::config(origin, "pilot_idle_ttl_seconds must be non-negative"));
        }
        let identity_map = IdentityMap::load(&resolve(&file.identity_map_file))?;
        let state_dir = file
            .state_dir
            .map(|p| resolve(&p))
            .unwrap_or_else(|| template.workspace_root.join(".agent"));
        let config = AgentConfig {
            broker_url: file.broker_url,
            endpoint_id: file.endpoint_id,
            agent_key,
            identity_map,
            poll_interval: Duration::from_secs_f64(file.poll_interval_seconds),
            long_poll_seconds: file.long_poll_seconds,
            claim_batch: file.claim_batch,
            state_dir,
            allow_list: file.allow_list,
            provenance_tools: file.provenance_tools,
            template,
        };
        config.provider_spec().validate().map_err(|e| AgentError::config(origin, e.to_string()))?;
        Ok(config)
    }

    pub fn provider_spec(&self) -> ProviderSpec {
        let t = &self.template;
        let batch = t.batch.as_ref().map(|b| BatchSpec {
            submit_cmd_template: b.submit_cmd_template.clone(),
            status_cmd_template: b.status_cmd_template.clone(),
            cancel_cmd_template: b.cancel_cmd_template.clone(),
            directives: t.batch_directives.clone(),
            directive_prefix: b.directive_prefix.clone().unwrap_or_else(|| "#SIM ".into()),
            job_id_regex: b.job_id_regex.clone(),
        });
        ProviderSpec {
            kind: match t.provider_kind {
                ProviderKind::Local => ci_providers::ProviderKind::Local,
                ProviderKind::Batch => ci_providers::ProviderKind::Batch,
            },
            pilot_size: t.pilot_size as usize,
            batch,
        }
    }
}
