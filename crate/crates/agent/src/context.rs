use std::collections::BTreeMap;
use std::ffi::CString;
use std::os::unix::fs::{DirBuilderExt, PermissionsExt};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use ci_protocol::{FunctionId, RunId, TaskSpec};
use ci_providers::{
    BatchPool, BatchPoolConfig, CommandScheduler, Executor, LocalPool, PilotJob, ProviderKind,
    ProviderSpec, ProvisionFailure, WorkQueue,
};
use parking_lot::Mutex;

use crate::config::TaskNetwork;
use crate::error::{AgentError, Result};
use crate::exec::{chown_tree, RunAs};

/// First uid handed to mapped accounts that have no system user.
pub const SYNTHETIC_UID_BASE: u32 = 200_000;

/// One claimed task on its way to a worker.
#[derive(Debug, Clone)]
pub struct Job {
    pub run_id: RunId,
    pub spec: TaskSpec,
    pub payload: Option<String>,
    pub account: String,
    pub workspace: PathBuf,
    pub run_as: Option<RunAs>,
}

/// Settings shared by every user endpoint an agent forks.
#[derive(Debug, Clone)]
pub struct ContextSettings {
    pub workspace_root: PathBuf,
    /// Pilot launch scripts go under `<state_dir>/pilots/<account>`.
    pub state_dir: PathBuf,
    pub provider: ProviderSpec,
    pub pilot_idle_ttl: Duration,
    pub status_interval: Duration,
    /// Every account the identity map can produce, sorted. Fixes synthetic uids.
    pub accounts: Vec<String>,
    /// Switch task processes to per-account credentials. Only possible as root.
    pub switch_user: bool,
    pub allow_list: std::collections::BTreeSet<FunctionId>,
    pub provenance_tools: Vec<String>,
    pub network: TaskNetwork,
}

enum Pool {
    Local(LocalPool<Job>),
    Batch(BatchPool<Job>),
}

impl Pool {
    fn queue(&self) -> &Arc<WorkQueue<Job>> {
        match self {
            Pool::Local(p) => p.queue(),
            Pool::Batch(p) => p.queue(),
        }
    }

    fn shutdown(&mut self) {
        match self {
            Pool::Local(p) => p.shutdown(),
            Pool::Batch(p) => p.shutdown(),
        }
    }
}

/// A user endpoint: one local account's workspace and worker pool.
pub struct UserEndpointContext {
    pub account: String,
    pub workspace: PathBuf,
    pub run_as: Option<RunAs>,
    pool: Mutex<Pool>,
    worker_count: usize,
}

impl std::fmt::Debug for UserEndpointContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UserEndpointContext")
            .field("account", &self.account)
            .field("workspace", &self.workspace)
            .field("run_as", &self.run_as)
            .finish_non_exhaustive()
    }
}

impl UserEndpointContext {
    /// Queues a job on this user's pool; gives it back if the pool is shut down.
    pub fn enqueue(&self, job: Job) -> std::result::Result<(), Job> {
        self.pool.lock().queue().push(job)
    }

    pub fn queued(&self) -> usize {
        self.pool.lock().queue().len()
    }

    /// Workers per pilot for batch pools, worker threads for local ones.
    pub fn worker_count(&self) -> usize {
        self.worker_count
    }

    /// Pilots submitted so far; empty for a local pool.
    pub fn pilots(&self) -> Vec<PilotJob> {
        match &*self.pool.lock() {
            Pool::Local(_) => Vec::new(),
            Pool::Batch(p) => p.pilots(),
        }
    }

    fn shutdown(&self) {
        self.pool.lock().shutdown();
    }
}

/// Uid and gid of a system user, if one exists.
fn system_user(account: &str) -> Option<RunAs> {
    let name = CString::new(account).ok()?;
    let mut buf = vec![0 as libc::c_char; 16 * 1024];
    // SAFETY: passwd is plain data; getpwnam_r writes only into pwd and buf,
    // whose sizes are passed, and sets result to null or &pwd.
    unsafe {
        let mut pwd: libc::passwd = std::mem::zeroed();
        let mut result: *mut libc::passwd = std::ptr::null_mut();
        let rc = libc::getpwnam_r(name.as_ptr(), &mut pwd, buf.as_mut_ptr(), buf.len(), &mut result);
        (rc == 0 && !result.is_null()).then_some(RunAs {
            uid: pwd.pw_uid,
            gid: pwd.pw_gid,
        })
    }
}

/// Credentials for `account`: its system user, or a synthetic uid fixed by
/// its position among the mapped accounts.
pub fn account_credentials(account: &str, accounts: &[String]) -> Option<RunAs> {
    if let Some(who) = system_user(account) {
        return (who.uid != 0).then_some(who);
    }
    let index = accounts.iter().position(|a| a == account)? as u32;
    let id = SYNTHETIC_UID_BASE + index;
    Some(RunAs { uid: id, gid: id })
}

pub fn running_as_root() -> bool {
    // SAFETY: geteuid has no preconditions.
    unsafe { libc::geteuid() == 0 }
}

fn create_workspace(root: &Path, account: &str, run_as: Option<RunAs>) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(root)?;
    if run_as.is_some() {
        // other accounts must be able to reach their own directory below it
        let mut perms = std::fs::metadata(root)?.permissions();
        perms.set_mode(perms.mode() | 0o111);
        std::fs::set_permissions(root, perms)?;
    }
    let workspace = root.join(account);
    match std::fs::DirBuilder::new().mode(0o700).create(&workspace) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists && workspace.is_dir() => {}
        Err(e) => return Err(e),
    }
    std::fs::set_permissions(&workspace, std::fs::Permissions::from_mode(0o700))?;
    if let Some(who) = run_as {
        chown_tree(&workspace, who)?;
    }
    Ok(workspace)
}

/// The agent's table of user endpoints, keyed by local account.
pub struct UserEndpoints {
    settings: ContextSettings,
    exec: Executor<Job>,
    on_failure: ProvisionFailure<Job>,
    contexts: Mutex<BTreeMap<String, Arc<UserEndpointContext>>>,
}

impl UserEndpoints {
    pub fn new(settings: ContextSettings, exec: Executor<Job>, on_failure: ProvisionFailure<Job>) -> Self {
        UserEndpoints {
            settings,
            exec,
            on_failure,
            contexts: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn settings(&self) -> &ContextSettings {
        &self.settings
    }

    /// Creates the account's workspace and pool on first use and returns the
    /// existing context afterwards.
    pub fn ensure_user_endpoint(&self, account: &str) -> Result<Arc<UserEndpointContext>> {
        let mut contexts = self.contexts.lock();
        if let Some(ctx) = contexts.get(account) {
            return Ok(ctx.clone());
        }
        let s = &self.settings;
        let run_as = if s.switch_user {
            Some(account_credentials(account, &s.accounts).ok_or_else(|| AgentError::WorkspaceCreation {
                path: s.workspace_root.join(account),
                message: format!("no credentials for account `{account}`"),
            })?)
        } else {
            None
        };
        let workspace = create_workspace(&s.workspace_root, account, run_as).map_err(|e| {
            AgentError::WorkspaceCreation {
                path: s.workspace_root.join(account),
                message: e.to_string(),
            }
        })?;
        let size = s.provider.pilot_size;
        let pool = match s.provider.kind {
            ProviderKind::Local => Pool::Local(LocalPool::start(size, self.exec.clone(), s.status_interval)?),
            ProviderKind::Batch => {
                let spec = s.provider.batch.clone().expect("validated batch spec");
                let scheduler = Arc::new(CommandScheduler::new(spec.clone())?);
                let config = BatchPoolConfig {
                    pilot_size: size,
                    idle_ttl: s.pilot_idle_ttl,
                    status_interval: s.status_interval,
                    script_dir: s.state_dir.join("pilots").join(account),
                    spec,
                    worker_command: format!("ci-agent-worker --account {account}"),
                    max_failures: 3,
                };
                Pool::Batch(BatchPool::start(config, scheduler, self.exec.clone(), self.on_failure.clone())?)
            }
        };
        let ctx = Arc::new(UserEndpointContext {
            account: account.to_string(),
            workspace,
            run_as,
            pool: Mutex::new(pool),
            worker_count: size,
        });
        contexts.insert(account.to_string(), ctx.clone());
        Ok(ctx)
    }

    pub fn get(&self, account: &str) -> Option<Arc<UserEndpointContext>> {
        self.contexts.lock().get(account).cloned()
    }

    pub fn accounts(&self) -> Vec<String> {
        self.contexts.lock().keys().cloned().collect()
    }

    /// Stops every pool, waiting for running tasks to finish.
    pub fn shutdown(&self) {
        let contexts: Vec<_> = self.contexts.lock().values().cloned().collect();
        for ctx in contexts {
            ctx.shutdown();
        }
    }
}
