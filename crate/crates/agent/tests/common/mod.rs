#![allow(dead_code)]

use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use ci_agent::AgentConfig;
use ci_broker::{Broker, BrokerConfig};
use ci_protocol::api::{EndpointDescriptor, EndpointRegistration};
use ci_protocol::{EndpointMode, FunctionId, RunId, TaskRun};

/// A broker served over HTTP on a fixed port that can be taken down and
/// brought back without losing state.
pub struct TestBroker {
    pub broker: Arc<Broker>,
    pub url: String,
    addr: SocketAddr,
    /// The serving runtime; dropping it kills the listener and all connections.
    server: Option<tokio::runtime::Runtime>,
    _dir: tempfile::TempDir,
}

impl TestBroker {
    pub fn start() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = BrokerConfig {
            fsync: false,
            ..BrokerConfig::default()
        };
        let broker = Arc::new(
            Broker::open(dir.path(), config)
                .unwrap()
                .with_credential("alice-ci", "alice-secret", "alice@site-a")
                .with_credential("bob-ci", "bob-secret", "bob@site-a")
                .with_credential("eve-ci", "eve-secret", "eve@elsewhere"),
        );
        let mut tb = TestBroker {
            broker,
            url: String::new(),
            addr: "127.0.0.1:0".parse().unwrap(),
            server: None,
            _dir: dir,
        };
        tb.up();
        tb.url = format!("http://{}", tb.addr);
        tb
    }

    /// Serves on the remembered port, or a fresh one the first time.
    pub fn up(&mut self) {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .unwrap();
        let listener = rt.block_on(tokio::net::TcpListener::bind(self.addr)).unwrap();
        self.addr = listener.local_addr().unwrap();
        let fut = ci_broker::serve(self.broker.clone(), listener, Duration::from_secs(3600), std::future::pending());
        rt.spawn(fut);
        self.server = Some(rt);
    }

    /// Drops the listener and every open connection at once.
    pub fn down(&mut self) {
        if let Some(rt) = self.server.take() {
            rt.shutdown_timeout(Duration::from_secs(5));
        }
    }

    pub fn token(&self, who: &str) -> String {
        self.broker.issue_token(&format!("{who}-ci"), &format!("{who}-secret")).unwrap().token
    }

    pub fn endpoint(&self, allow_list: BTreeSet<FunctionId>) -> EndpointRegistration {
        let descriptor = EndpointDescriptor {
            display_name: "site".into(),
            mode: EndpointMode::MultiUser,
            protected: false,
            reviewer: None,
            allow_list,
            template: None,
        };
        self.broker.register_endpoint(&self.token("alice"), descriptor).unwrap()
    }

    pub fn run(&self, run_id: &RunId) -> TaskRun {
        self.broker.state().run(run_id).cloned().expect("known run")
    }

    /// Waits until the run is terminal, panicking after `limit`.
    pub fn wait_terminal(&self, run_id: &RunId, limit: Duration) -> TaskRun {
        let started = Instant::now();
        loop {
            let run = self.run(run_id);
            if run.state.is_terminal() {
                return run;
            }
            assert!(started.elapsed() < limit, "run {run_id} still {} after {limit:?}", run.state);
            std::thread::sleep(Duration::from_millis(50));
        }
    }
}

impl Drop for TestBroker {
    fn drop(&mut self) {
        self.down();
    }
}

pub const IDENTITIES: &str = "alice@site-a alice\nbob@site-a bob\n";

/// Writes an identity map and config file under `dir` and loads them the
/// way the daemon does. `extra` is appended to the top-level table and
/// `template_extra` to `[template]`.
pub fn agent_config(
    dir: &Path,
    broker_url: &str,
    reg: &EndpointRegistration,
    extra: &str,
    template_extra: &str,
) -> AgentConfig {
    // lets per-account task uids reach their workspaces below `dir`
    std::fs::set_permissions(dir, std::os::unix::fs::PermissionsExt::from_mode(0o755)).unwrap();
    std::fs::write(dir.join("identities"), IDENTITIES).unwrap();
    let text = format!(
        r#"
broker_url = "{broker_url}"
endpoint_id = "{endpoint}"
identity_map_file = "identities"
poll_interval_seconds = 0.1
long_poll_seconds = 1
{extra}

[template]
provider_kind = "local"
pilot_size = 2
workspace_root = "ws"
{template_extra}
"#,
        endpoint = reg.endpoint_id,
    );
    let path = dir.join("agent.toml");
    std::fs::write(&path, &text).unwrap();
    AgentConfig::from_toml(&text, &path, Some(reg.agent_key.clone())).unwrap()
}

fn git(dir: &Path, args: &[&str]) -> String {
    let out = Command::new("git")
        .args(["-c", "user.name=Fixture", "-c", "user.email=fixture@example.org", "-c", "init.defaultBranch=main"])
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "git {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).trim().to_string()
}

/// A repository with two commits on `main` and one on branch `feature`.
pub struct GitFixture {
    pub path: PathBuf,
    pub first: String,
    pub main_tip: String,
    pub feature_tip: String,
}

pub fn git_fixture(parent: &Path) -> GitFixture {
    let path = parent.join("fixture-repo");
    std::fs::create_dir_all(&path).unwrap();
    git(&path, &["init", "--quiet"]);
    std::fs::write(path.join("version.txt"), "one\n").unwrap();
    git(&path, &["add", "."]);
    git(&path, &["commit", "--quiet", "-m", "first"]);
    let first = git(&path, &["rev-parse", "HEAD"]);
    std::fs::write(path.join("version.txt"), "two\n").unwrap();
    git(&path, &["commit", "--quiet", "-am", "second"]);
    let main_tip = git(&path, &["rev-parse", "main"]);
    git(&path, &["checkout", "--quiet", "-b", "feature"]);
    std::fs::write(path.join("version.txt"), "feature\n").unwrap();
    git(&path, &["commit", "--quiet", "-am", "feature"]);
    let feature_tip = git(&path, &["rev-parse", "feature"]);
    git(&path, &["checkout", "--quiet", "main"]);
    GitFixture {
        path,
        first,
        main_tip,
        feature_tip,
    }
}
