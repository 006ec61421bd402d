use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use ci_protocol::policy::{allow_list_permits, truncate_output, OUTPUT_LIMIT_BYTES};
use ci_protocol::{FunctionId, ProvenanceSnapshot, RunId, TaskKind, TaskResult, TaskSpec};

use crate::config::TaskNetwork;
use crate::exec::{chown_tree, run_process_as, RunAs};
use crate::provenance::capture_provenance;
use crate::staging::stage_repo;

/// Where a task's artifacts are collected from.
pub const ARTIFACT_ENV: &str = "CI_ARTIFACT_OUT";

/// Everything `run_task` needs besides the spec.
#[derive(Debug, Clone)]
pub struct TaskContext<'a> {
    pub run_id: RunId,
    pub workspace: &'a Path,
    pub allow_list: &'a std::collections::BTreeSet<FunctionId>,
    pub payload: Option<&'a str>,
    pub provenance_tools: &'a [String],
    pub network: TaskNetwork,
    /// Credentials of the mapped account, when the agent can switch to them.
    pub run_as: Option<RunAs>,
}

#[derive(Debug, Clone)]
pub struct TaskOutcome {
    pub result: TaskResult,
    /// `<workspace>/runs/<run_id>`; holds `out/` for `CI_ARTIFACT_OUT`.
    pub run_dir: PathBuf,
}

impl TaskOutcome {
    pub fn artifact_dir(&self) -> PathBuf {
        self.run_dir.join("out")
    }
}

/// Environment handed to task processes: a minimal base, then the spec's own
/// variables, then the agent-controlled ones.
pub fn task_env(spec: &TaskSpec, ctx: &TaskContext<'_>, cwd: &Path, out_dir: &Path) -> BTreeMap<String, String> {
    let mut env = BTreeMap::new();
    for key in ["PATH", "LANG", "LC_ALL", "TZ", "TERM"] {
        if let Ok(v) = std::env::var(key) {
            env.insert(key.to_string(), v);
        }
    }
    env.extend(spec.env.clone());
    env.insert("HOME".into(), ctx.workspace.to_string_lossy().into_owned());
    env.insert("TMPDIR".into(), cwd.to_string_lossy().into_owned());
    env.insert(ARTIFACT_ENV.into(), out_dir.to_string_lossy().into_owned());
    env.insert("CI_RUN_ID".into(), ctx.run_id.to_string());
    env.insert("CI_WORKSPACE".into(), ctx.workspace.to_string_lossy().into_owned());
    if ctx.network == TaskNetwork::None {
        for key in ["http_proxy", "https_proxy", "HTTP_PROXY", "HTTPS_PROXY", "ALL_PROXY", "all_proxy"] {
            env.insert(key.into(), "http://127.0.0.1:9".into());
        }
        env.remove("no_proxy");
        env.remove("NO_PROXY");
        env.insert("GIT_ALLOW_PROTOCOL".into(), "none".into());
    }
    env
}

fn fail(reason: &str, message: impl Into<String>, provenance: Option<ProvenanceSnapshot>) -> TaskResult {
    TaskResult {
        provenance,
        ..TaskResult::aborted(reason, message)
    }
}

/// Executes one claimed task: allow-list re-check, optional staging into a
/// fresh directory, then the shell command or function payload under `sh -c`
/// with the spec's timeout. `on_running` fires just before the command starts.
pub fn run_task(spec: &TaskSpec, ctx: &TaskContext<'_>, on_running: impl FnOnce()) -> TaskOutcome {
    let run_dir = ctx.workspace.join("runs").join(ctx.run_id.to_string());
    let out_dir = run_dir.join("out");
    let outcome = |result| TaskOutcome {
        result,
        run_dir: run_dir.clone(),
    };
    if !allow_list_permits(ctx.allow_list, spec) {
        return outcome(fail("function_not_allowed", "task refused by the endpoint allow-list", None));
    }
    if let Err(e) = std::fs::create_dir_all(&out_dir) {
        return outcome(fail("workspace_creation_failure", format!("{}: {e}", out_dir.display()), None));
    }
    let timeout = Duration::from_secs(spec.timeout_seconds);

    let (cwd, commit) = match &spec.repo {
        Some(repo) => match stage_repo(&repo.url, &repo.git_ref, &run_dir, timeout) {
            Ok(staged) => (staged.dir, Some(staged.commit)),
            Err(e) => {
                let env = task_env(spec, ctx, &run_dir, &out_dir);
                let prov = capture_provenance(&env, ctx.provenance_tools);
                return outcome(fail("staging_failure", e.to_string(), Some(prov)));
            }
        },
        None => (run_dir.clone(), None),
    };

    let script = match spec.kind {
        TaskKind::Shell => spec.shell_cmd.clone(),
        TaskKind::Function => ctx.payload.map(str::to_string),
    };
    let Some(script) = script else {
        return outcome(fail("staging_failure", "claimed task carries no command", None));
    };

    let env = task_env(spec, ctx, &cwd, &out_dir);
    let mut provenance = capture_provenance(&env, ctx.provenance_tools);
    provenance.repo_commit = commit;

    if let Some(who) = ctx.run_as {
        if let Err(e) = chown_tree(&run_dir, who) {
            return outcome(fail("workspace_creation_failure", format!("{}: {e}", run_dir.display()), Some(provenance)));
        }
    }

    let mut args = vec!["-c".to_string(), script, "task".to_string()];
    args.extend(spec.args.iter().cloned());
    on_running();
    let exec = match run_process_as("sh", &args, &cwd, &env, timeout, ctx.run_as) {
        Ok(e) => e,
        Err(e) => return outcome(fail("spawn_failure", format!("cannot start sh: {e}"), Some(provenance))),
    };
    let (stdout, stdout_truncated) = truncate_output(&exec.stdout, OUTPUT_LIMIT_BYTES);
    let (mut stderr, stderr_truncated) = truncate_output(&exec.stderr, OUTPUT_LIMIT_BYTES);
    let failure_reason = if exec.timed_out {
        if !stderr.is_empty() && !stderr.ends_with('\n') {
            stderr.push('\n');
        }
        stderr.push_str(&format!(
            "task exceeded its timeout of {} s; process group killed\n",
            spec.timeout_seconds
        ));
        Some("timeout".to_string())
    } else if exec.exit_code != 0 {
        Some("nonzero_exit".to_string())
    } else {
        None
    };
    outcome(TaskResult {
        exit_code: exec.exit_code,
        stdout,
        stdout_truncated: stdout_truncated || exec.stdout_truncated,
        stderr,
        stderr_truncated: stderr_truncated || exec.stderr_truncated,
        duration_seconds: exec.duration.as_secs_f64(),
        provenance: Some(provenance),
        failure_reason,
    })
}
