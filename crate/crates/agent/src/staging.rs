use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use crate::error::{AgentError, Result};
use crate::exec::run_process;

/// A checked-out repository in a fresh directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Staged {
    pub dir: PathBuf,
    pub commit: String,
}

fn git_env() -> BTreeMap<String, String> {
    let mut env = BTreeMap::new();
    for key in ["PATH", "HOME", "http_proxy", "https_proxy", "HTTP_PROXY", "HTTPS_PROXY", "no_proxy", "NO_PROXY"] {
        if let Ok(v) = std::env::var(key) {
            env.insert(key.to_string(), v);
        }
    }
    env.insert("GIT_TERMINAL_PROMPT".into(), "0".into());
    env.insert("LC_ALL".into(), "C".into());
    env
}

fn git(args: &[&str], cwd: &Path, timeout: Duration) -> Result<String> {
    let args: Vec<String> = args.iter().map(|s| s.to_string()).collect();
    let out = run_process("git", &args, cwd, &git_env(), timeout)
        .map_err(|e| AgentError::CloneFailure(format!("cannot run git: {e}")))?;
    if out.timed_out {
        return Err(AgentError::CloneFailure(format!("git {} timed out", args[0])));
    }
    if out.exit_code != 0 {
        return Err(AgentError::CloneFailure(
            String::from_utf8_lossy(&out.stderr).trim().to_string(),
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).trim().to_string())
}

/// Clones `url` into a new uniquely named directory under `dest_parent` and
/// checks out exactly `git_ref` (a commit hash, tag or branch name) detached.
/// The directory is removed again on failure.
pub fn stage_repo(url: &str, git_ref: &str, dest_parent: &Path, timeout: Duration) -> Result<Staged> {
    if git_ref.starts_with('-') || git_ref.is_empty() {
        return Err(AgentError::CloneFailure(format!("invalid ref `{git_ref}`")));
    }
    std::fs::create_dir_all(dest_parent)?;
    let holder = tempfile::Builder::new().prefix("stage-").tempdir_in(dest_parent)?;
    let dir = holder.path().join("repo");
    let dir_str = dir.to_string_lossy().into_owned();
    git(&["clone", "--quiet", "--", url, &dir_str], holder.path(), timeout)?;

    let candidates = [
        format!("{git_ref}^{{commit}}"),
        format!("refs/remotes/origin/{git_ref}^{{commit}}"),
    ];
    let commit = candidates
        .iter()
        .find_map(|c| git(&["rev-parse", "--verify", "--quiet", c], &dir, timeout).ok())
        .filter(|c| !c.is_empty())
        .ok_or_else(|| AgentError::CloneFailure(format!("ref `{git_ref}` not found in {url}")))?;
    git(&["checkout", "--quiet", "--detach", &commit], &dir, timeout)?;
    let head = git(&["rev-parse", "HEAD"], &dir, timeout)?;
    let _ = holder.keep();
    Ok(Staged { dir, commit: head })
}
