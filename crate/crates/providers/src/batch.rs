use std::collections::BTreeMap;
use std::process::Command;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{ProviderError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Local,
    Batch,
}

/// Scheduler command templates. `{script}` is replaced by the shell-quoted
/// path of the pilot launch script, `{job_id}` by the shell-quoted job id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSpec {
    pub submit_cmd_template: String,
    pub status_cmd_template: String,
    pub cancel_cmd_template: String,
    /// Written into the launch script as `<directive_prefix><key>=<value>` lines.
    #[serde(default)]
    pub directives: BTreeMap<String, String>,
    #[serde(default = "default_directive_prefix")]
    pub directive_prefix: String,
    /// Overrides last-token job id parsing. Capture group 1 if present, else the whole match.
    #[serde(default)]
    pub job_id_regex: Option<String>,
}

fn default_directive_prefix() -> String {
    "#SIM ".into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderSpec {
    pub kind: ProviderKind,
    pub pilot_size: usize,
    #[serde(default)]
    pub batch: Option<BatchSpec>,
}

impl ProviderSpec {
    pub fn local(pilot_size: usize) -> Self {
        ProviderSpec {
            kind: ProviderKind::Local,
            pilot_size,
            batch: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pilot_size == 0 {
            return Err(ProviderError::InvalidTemplate("pilot_size must be at least 1".into()));
        }
        match (self.kind, &self.batch) {
            (ProviderKind::Local, _) => Ok(()),
            (ProviderKind::Batch, None) => Err(ProviderError::InvalidTemplate(
                "batch provider needs submit/status/cancel templates".into(),
            )),
            (ProviderKind::Batch, Some(batch)) => batch.validate(),
        }
    }
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        let need = [
            ("submit_cmd_template", &self.submit_cmd_template, "{script}"),
            ("status_cmd_template", &self.status_cmd_template, "{job_id}"),
            ("cancel_cmd_template", &self.cancel_cmd_template, "{job_id}"),
        ];
        for (name, template, placeholder) in need {
            if !template.contains(placeholder) {
                return Err(ProviderError::InvalidTemplate(format!(
                    "{name} must contain {placeholder}"
                )));
            }
        }
        if let Some(re) = &self.job_id_regex {
            Regex::new(re).map_err(|e| ProviderError::InvalidTemplate(format!("job_id_regex: {e}")))?;
        }
        Ok(())
    }

    /// The pilot launch script: shebang, directives, then the worker command.
    pub fn launch_script(&self, worker_command: &str) -> String {
        let mut script = String::from("#!/bin/sh\n");
        for (k, v) in &self.directives {
            script.push_str(&format!("{}{k}={v}\n", self.directive_prefix));
        }
        script.push_str(worker_command);
        script.push('\n');
        script
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PilotState {
    Pending,
    Running,
    Done,
    Failed,
}

impl PilotState {
    pub fn is_finished(self) -> bool {
        matches!(self, PilotState::Done | PilotState::Failed)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PilotState::Pending => "pending",
            PilotState::Running => "running",
            PilotState::Done => "done",
            PilotState::Failed => "failed",
        }
    }

    /// Maps scheduler status words (SLURM long and short forms, PBS letters,
    /// plain words) case-insensitively.
    pub fn from_status_word(word: &str) -> Result<Self> {
        let w = word.trim().to_ascii_uppercase();
        Ok(match w.as_str() {
            "PENDING" | "PD" | "QUEUED" | "Q" | "CONFIGURING" | "CF" | "HELD" | "H" => {
                PilotState::Pending
            }
            "RUNNING" | "R" | "COMPLETING" | "CG" => PilotState::Running,
            "COMPLETED" | "CD" | "DONE" | "EXITED" | "E" => PilotState::Done,
            "FAILED" | "F" | "CANCELLED" | "CANCELED" | "CA" | "TIMEOUT" | "TO" | "NODE_FAIL"
            | "NF" | "OUT_OF_MEMORY" | "OOM" | "BOOT_FAIL" | "BF" | "PREEMPTED" | "PR" => {
                PilotState::Failed
            }
            _ => return Err(ProviderError::UnknownState(word.trim().to_string())),
        })
    }
}

impl std::fmt::Display for PilotState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PilotJob {
    pub job_id: String,
    pub state: PilotState,
    pub worker_count: usize,
    /// Unix milliseconds.
    pub submitted_at: i64,
}

/// What a batch pool needs from a scheduler.
pub trait Scheduler: Send + Sync {
    /// `script` is the path of the launch script on disk.
    fn submit(&self, script: &str) -> Result<String>;
    fn status(&self, job_id: &str) -> Result<PilotState>;
    fn cancel(&self, job_id: &str) -> Result<()>;
}

/// POSIX single-quote escaping.
pub fn shell_quote(value: &str) -> String {
    format!("'{}'", value.replace('\'', r"'\''"))
}

pub fn render(template: &str, placeholder: &str, value: &str) -> String {
    template.replace(placeholder, &shell_quote(value))
}

/// Job id from submit output: the regex override, or the last
/// whitespace-delimited token.
pub fn parse_job_id(stdout: &str, regex: Option<&Regex>) -> Result<String> {
    let found = match regex {
        Some(re) => re.captures(stdout).and_then(|c| c.get(1).or_else(|| c.get(0))).map(|m| m.as_str()),
        None => stdout.split_whitespace().last(),
    };
    match found {
        Some(id) if !id.is_empty() => Ok(id.to_string()),
        _ => Err(ProviderError::ParseFailure(stdout.trim().to_string())),
    }
}

/// Drives a real (or simulated) scheduler CLI through `sh -c`.
#[derive(Debug, Clone)]
pub struct CommandScheduler {
    spec: BatchSpec,
    job_id_regex: Option<Regex>,
    env: Vec<(String, String)>,
}

impl CommandScheduler {
    pub fn new(spec: BatchSpec) -> Result<Self> {
        spec.validate()?;
        let job_id_regex = spec.job_id_regex.as_deref().map(Regex::new).transpose().map_err(
            |e| ProviderError::InvalidTemplate(format!("job_id_regex: {e}")),
        )?;
        Ok(CommandScheduler {
            spec,
            job_id_regex,
            env: Vec::new(),
        })
    }

    /// Extra environment for the scheduler commands.
    pub fn with_env(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.env.push((key.into(), value.into()));
        self
    }

    pub fn spec(&self) -> &BatchSpec {
        &self.spec
    }

    fn run(&self, cmd: &str) -> Result<std::process::Output> {
        let out = Command::new("sh")
            .arg("-c")
            .arg(cmd)
            .envs(self.env.iter().map(|(k, v)| (k, v)))
            .stdin(std::process::Stdio::null())
            .output()?;
        Ok(out)
    }

    fn failure(out: &std::process::Output) -> String {
        let stderr = String::from_utf8_lossy(&out.stderr);
        format!("exit {}: {}", out.status.code().unwrap_or(-1), stderr.trim())
    }
}

impl Scheduler for CommandScheduler {
    fn submit(&self, script: &str) -> Result<String> {
        let out = self.run(&render(&self.spec.submit_cmd_template, "{script}", script))?;
        if !out.status.success() {
            return Err(ProviderError::SubmitFailure(Self::failure(&out)));
        }
        parse_job_id(&String::from_utf8_lossy(&out.stdout), self.job_id_regex.as_ref())
    }

    fn status(&self, job_id: &str) -> Result<PilotState> {
        let out = self.run(&render(&self.spec.status_cmd_template, "{job_id}", job_id))?;
        if !out.status.success() {
            return Err(ProviderError::CommandFailure(Self::failure(&out)));
        }
        let stdout = String::from_utf8_lossy(&out.stdout);
        let word = stdout.split_whitespace().next().unwrap_or("");
        PilotState::from_status_word(word)
    }

    fn cancel(&self, job_id: &str) -> Result<()> {
        let out = self.run(&render(&self.spec.cancel_cmd_template, "{job_id}", job_id))?;
        if !out.status.success() {
            return Err(ProviderError::CommandFailure(Self::failure(&out)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn last_token_is_job_id() {
        assert_eq!(parse_job_id("Submitted batch job 4242\n", None).unwrap(), "4242");
        assert_eq!(parse_job_id("sim-1", None).unwrap(), "sim-1");
        assert!(parse_job_id("  \n", None).is_err());
    }

    #[test]
    fn regex_override() {
        let re = Regex::new(r"Job <(\d+)>").unwrap();
        let out = "Job <981> is submitted to queue <normal>.";
        assert_eq!(parse_job_id(out, Some(&re)).unwrap(), "981");
        assert!(parse_job_id("nothing here", Some(&re)).is_err());
    }

    #[test]
    fn status_words() {
        assert_eq!(PilotState::from_status_word("PD").unwrap(), PilotState::Pending);
        assert_eq!(PilotState::from_status_word("running\n").unwrap(), PilotState::Running);
        assert_eq!(PilotState::from_status_word("Completed").unwrap(), PilotState::Done);
        assert_eq!(PilotState::from_status_word("CA").unwrap(), PilotState::Failed);
        assert!(PilotState::from_status_word("bogus").is_err());
    }

    #[test]
    fn quoting_survives_shell() {
        let nasty = "it's $HOME `x` \"y\"";
        let out = Command::new("sh")
            .arg("-c")
            .arg(format!("printf %s {}", shell_quote(nasty)))
            .output()
            .unwrap();
        assert_eq!(String::from_utf8(out.stdout).unwrap(), nasty);
    }

    #[test]
    fn templates_need_placeholders() {
        let mut spec = BatchSpec {
            submit_cmd_template: "sbatch".into(),
            status_cmd_template: "squeue -h -o %T -j {job_id}".into(),
            cancel_cmd_template: "scancel {job_id}".into(),
            directives: BTreeMap::new(),
            directive_prefix: "#SBATCH --".into(),
            job_id_regex: None,
        };
        assert!(matches!(spec.validate(), Err(ProviderError::InvalidTemplate(_))));
        spec.submit_cmd_template = "sbatch {script}".into();
        spec.validate().unwrap();
        spec.job_id_regex = Some("(".into());
        assert!(spec.validate().is_err());
    }

    #[test]
    fn zero_pilot_size_rejected() {
        assert!(ProviderSpec::local(0).validate().is_err());
        assert!(ProviderSpec::local(1).validate().is_ok());
        let batch = ProviderSpec {
            kind: ProviderKind::Batch,
            pilot_size: 2,
            batch: None,
        };
        assert!(batch.validate().is_err());
    }

    #[test]
    fn launch_script_lists_directives() {
        let spec = BatchSpec {
            submit_cmd_template: "x {script}".into(),
            status_cmd_template: "x {job_id}".into(),
            cancel_cmd_template: "x {job_id}".into(),
            directives: [("walltime".to_string(), "600".to_string()), ("queue".to_string(), "debug".to_string())].into(),
            directive_prefix: "#SIM ".into(),
            job_id_regex: None,
        };
        assert_eq!(
            spec.launch_script("exec worker"),
            "#!/bin/sh\n#SIM queue=debug\n#SIM walltime=600\nexec worker\n"
        );
    }
}
