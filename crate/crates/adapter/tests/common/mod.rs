#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use ci_adapter::{Credentials, Secret, Site, StepInputs, Work};
use ci_agent::{Agent, AgentConfig, RunningAgent};
use ci_broker::{Broker, BrokerConfig};
use ci_protocol::api::{EndpointDescriptor, EndpointRegistration};
use ci_protocol::EndpointMode;

/// Broker served on a background runtime.
pub struct Live {
    pub broker: Arc<Broker>,
    pub url: String,
    _server: tokio::runtime::Runtime,
    _dir: tempfile::TempDir,
}

impl Live {
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
                .with_credential("rita-ci", "rita-secret", "rita@site-a"),
        );
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .unwrap();
        let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        rt.spawn(ci_broker::serve(broker.clone(), listener, Duration::from_secs(3600), std::future::pending()));
        Live {
            broker,
            url,
            _server: rt,
            _dir: dir,
        }
    }

    pub fn token(&self, who: &str) -> String {
        self.broker.issue_token(&format!("{who}-ci"), &format!("{who}-secret")).unwrap().token
    }

    pub fn endpoint(&self, protected: bool) -> EndpointRegistration {
        let descriptor = EndpointDescriptor {
            display_name: "site".into(),
            mode: EndpointMode::MultiUser,
            protected,
            reviewer: protected.then(|| "rita@site-a".to_string()),
            allow_list: BTreeSet::new(),
            template: None,
        };
        self.broker.register_endpoint(&self.token("alice"), descriptor).unwrap()
    }

    /// Starts a local-provider agent for `reg` with its files under `dir`.
    pub fn agent(&self, dir: &Path, reg: &EndpointRegistration) -> RunningAgent {
        std::fs::set_permissions(dir, std::os::unix::fs::PermissionsExt::from_mode(0o755)).unwrap();
        std::fs::write(dir.join("identities"), "alice@site-a alice\n").unwrap();
        let text = format!(
            "broker_url = \"{}\"\nendpoint_id = \"{}\"\nidentity_map_file = \"identities\"\n\
             poll_interval_seconds = 0.1\nlong_poll_seconds = 1\n\n[template]\nprovider_kind = \"local\"\n\
             pilot_size = 2\nworkspace_root = \"ws\"\n",
            self.url, reg.endpoint_id
        );
        let path = dir.join("agent.toml");
        std::fs::write(&path, &text).unwrap();
        let config = AgentConfig::from_toml(&text, &path, Some(reg.agent_key.clone())).unwrap();
        Agent::new(config).unwrap().spawn()
    }

    pub fn inputs(&self, sites: Vec<Site>, cmd: &str, artifact_dir: &Path) -> StepInputs {
        let credentials = Credentials {
            client_id: "alice-ci".into(),
            client_secret: Secret::new("alice-secret"),
        };
        let mut inputs = StepInputs::new(&self.url, credentials, sites, Work::Shell(cmd.into())).with_timeout(60);
        inputs.artifact_dir = artifact_dir.to_path_buf();
        inputs.poll_interval = Duration::from_millis(100);
        inputs.retry_base = Duration::from_millis(50);
        inputs.max_retries = 2;
        inputs
    }
}

pub fn site(label: &str, reg: &EndpointRegistration) -> Site {
    Site {
        label: label.into(),
        endpoint_id: reg.endpoint_id,
    }
}

pub fn block_on<F: std::future::Future>(f: F) -> F::Output {
    tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap().block_on(f)
}

/// Runs a step, returning (exit code, relayed stdout, relayed stderr, output).
pub fn step(inputs: &StepInputs) -> (i32, Vec<u8>, String, ci_adapter::StepOutput) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let o = block_on(ci_adapter::run_step(inputs, &mut out, &mut err));
    (o.exit_code, out, String::from_utf8(err).unwrap(), o)
}
