use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ci_broker::{Broker, BrokerConfig, Clock, ManualClock};
use ci_client::{AgentClient, AuditQuery, ClientError, RunQuery, UserClient};
use ci_protocol::api::*;
use ci_protocol::*;

struct Served {
    _dir: tempfile::TempDir,
    broker: Arc<Broker>,
    clock: Arc<ManualClock>,
    url: String,
    _stop: tokio::sync::oneshot::Sender<()>,
}

async fn serve() -> Served {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(ManualClock::new(Timestamp::now()));
    let config = BrokerConfig {
        fsync: false,
        ..BrokerConfig::default()
    };
    let broker = Arc::new(
        Broker::open_with_clock(dir.path(), config, clock.clone())
            .unwrap()
            .with_credential("alice-ci", "alice-secret", "alice@site-a")
            .with_credential("bob-ci", "bob-secret", "bob@site-a"),
    );
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    tokio::spawn(ci_broker::serve(
        broker.clone(),
        listener,
        Duration::from_secs(3600),
        async move {
            let _ = stopped.await;
        },
    ));
    Served {
        _dir: dir,
        broker,
        clock,
        url,
        _stop: stop,
    }
}

fn open_descriptor() -> EndpointDescriptor {
    EndpointDescriptor {
        display_name: "cloud".into(),
        mode: EndpointMode::MultiUser,
        protected: false,
        reviewer: None,
        allow_list: BTreeSet::new(),
        template: None,
    }
}

fn agent(s: &Served, reg: &EndpointRegistration) -> AgentClient {
    AgentClient::new(&s.url, reg.endpoint_id, &reg.agent_key, Duration::from_secs(30)).unwrap()
}

fn result(exit_code: i32, stdout: &str) -> TaskResult {
    TaskResult {
        exit_code,
        stdout: stdout.into(),
        stdout_truncated: false,
        stderr: String::new(),
        stderr_truncated: false,
        duration_seconds: 0.5,
        provenance: None,
        failure_reason: None,
    }
}

#[tokio::test]
async fn login_and_bad_credentials() {
    let s = serve().await;
    let alice = UserClient::new(&s.url, "alice-ci", "alice-secret").unwrap();
    let token = alice.login().await.unwrap();
    assert_eq!(token.subject, "alice@site-a");

    let bad = UserClient::new(&s.url, "alice-ci", "wrong").unwrap();
    match bad.login().await.unwrap_err() {
        ClientError::Api { status, code, .. } => {
            assert_eq!(status, 401);
            assert_eq!(code, "auth_failure");
        }
        other => panic!("{other:?}"),
    }
    let failures = alice
        .query_audit(&AuditQuery {
            action: Some(AuditAction::AuthFailure),
            ..Default::default()
        })
        .await
        .unwrap();
    assert_eq!(failures.len(), 1);
}

#[tokio::test]
async fn unreachable_broker_is_distinguished() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let client = UserClient::new(&url, "a", "b").unwrap();
    let err = client.login().await.unwrap_err();
    assert_eq!(err.code(), "unreachable");
}

#[tokio::test]
async fn full_run_over_http() {
    let s = serve().await;
    let alice = UserClient::new(&s.url, "alice-ci", "alice-secret").unwrap();
    let reg = alice.register_endpoint(&open_descriptor()).await.unwrap();
    let agent = agent(&s, &reg);

    let spec = TaskSpec::shell(reg.endpoint_id, "pytest").with_repo("https://example.org/r.git", "main");
    let submitted = alice.submit_task(&spec).await.unwrap();
    assert_eq!(submitted.state, RunState::Queued);

    let claimed = agent.poll(4, 0).await.unwrap();
    assert_eq!(claimed.len(), 1);
    assert_eq!(claimed[0].spec.repo, spec.repo);
    assert_eq!(agent.report_state(&submitted.run_id, RunState::Staging).await.unwrap(), RunState::Staging);
    assert_eq!(agent.report_state(&submitted.run_id, RunState::Running).await.unwrap(), RunState::Running);

    let err = alice.get_result(&submitted.run_id).await.unwrap_err();
    assert_eq!(err.code(), "not_terminal");

    let report = ResultReport {
        terminal_state: RunState::Completed,
        result: result(0, "3 passed"),
        artifact_files: vec![FileUpload {
            relative_path: "stdout.txt".into(),
            content_b64: B64.encode("3 passed"),
        }],
    };
    let ack = agent.report_result(&submitted.run_id, &report).await.unwrap();
    assert_eq!(ack.state, RunState::Completed);
    let again = agent.report_result(&submitted.run_id, &report).await.unwrap();
    assert_eq!(ack, again);

    assert_eq!(alice.get_result(&submitted.run_id).await.unwrap().stdout, "3 passed");
    let content = alice.get_artifact(&ack.artifact_id.unwrap()).await.unwrap();
    assert_eq!(content.files.len(), 1);
    assert_eq!(B64.decode(&content.files[0].content_b64).unwrap(), b"3 passed");

    let done = alice
        .list_runs(&RunQuery {
            endpoint_id: Some(reg.endpoint_id),
            state: Some(RunState::Completed),
        })
        .await
        .unwrap();
    assert_eq!(done.len(), 1);
    let queued = alice
        .list_runs(&RunQuery {
            state: Some(RunState::Queued),
            ..Default::default()
        })
        .await
        .unwrap();
    assert!(queued.is_empty());

    let chain = alice
        .query_audit(&AuditQuery {
            subject: Some(submitted.run_id.to_string()),
            action: Some(AuditAction::StateChanged),
            ..Default::default()
        })
        .await
        .unwrap();
    assert_eq!(chain.len(), 5);

    let endpoints = alice.list_endpoints().await.unwrap();
    assert_eq!(endpoints.len(), 1);
    assert_eq!(endpoints[0].status, EndpointStatus::Online);
}

#[tokio::test]
async fn approval_flow_and_reviewer_check() {
    let s = serve().await;
    let alice = UserClient::new(&s.url, "alice-ci", "alice-secret").unwrap();
    let bob = UserClient::new(&s.url, "bob-ci", "bob-secret").unwrap();
    let reg = alice
        .register_endpoint(&EndpointDescriptor {
            protected: true,
            reviewer: Some("alice@site-a".into()),
            ..open_descriptor()
        })
        .await
        .unwrap();
    let run = bob
        .submit_task(&TaskSpec::shell(reg.endpoint_id, "make test"))
        .await
        .unwrap();
    assert_eq!(run.state, RunState::PendingApproval);
    match bob.approve(&run.run_id).await.unwrap_err() {
        ClientError::Api { status, code, .. } => {
            assert_eq!(status, 403);
            assert_eq!(code, "not_reviewer");
        }
        other => panic!("{other:?}"),
    }
    assert!(agent(&s, &reg).poll(5, 0).await.unwrap().is_empty());
    assert_eq!(alice.approve(&run.run_id).await.unwrap().state, RunState::Queued);
    assert_eq!(agent(&s, &reg).poll(5, 0).await.unwrap().len(), 1);
}

#[tokio::test]
async fn long_poll_wakes_on_submit() {
    let s = serve().await;
    let alice = UserClient::new(&s.url, "alice-ci", "alice-secret").unwrap();
    let reg = alice.register_endpoint(&open_descriptor()).await.unwrap();
    let agent = agent(&s, &reg);
    let started = Instant::now();
    let waiter = tokio::spawn(async move { agent.poll(1, 10).await });
    tokio::time::sleep(Duration::from_millis(300)).await;
    alice
        .submit_task(&TaskSpec::shell(reg.endpoint_id, "true"))
        .await
        .unwrap();
    let claimed = waiter.await.unwrap().unwrap();
    assert_eq!(claimed.len(), 1);
    assert!(started.elapsed() < Duration::from_secs(5), "{:?}", started.elapsed());
}

#[tokio::test]
async fn long_poll_returns_empty_after_wait() {
    let s = serve().await;
    let alice = UserClient::new(&s.url, "alice-ci", "alice-secret").unwrap();
    let reg = alice.register_endpoint(&open_descriptor()).await.unwrap();
    let started = Instant::now();
    assert!(agent(&s, &reg).poll(1, 1).await.unwrap().is_empty());
    assert!(started.elapsed() >= Duration::from_millis(900));
}

#[tokio::test]
async fn purged_artifact_is_gone_with_metadata() {
    let s = serve().await;
    let alice = UserClient::new(&s.url, "alice-ci", "alice-secret").unwrap();
    let reg = alice.register_endpoint(&open_descriptor()).await.unwrap();
    let agent = agent(&s, &reg);
    let run = alice
        .submit_task(&TaskSpec::shell(reg.endpoint_id, "true"))
        .await
        .unwrap()
        .run_id;
    agent.poll(1, 0).await.unwrap();
    let ack = agent
        .report_result(
            &run,
            &ResultReport {
                terminal_state: RunState::Completed,
                result: result(0, "x"),
                artifact_files: vec![FileUpload {
                    relative_path: "out/report.json".into(),
                    content_b64: B64.encode("{}"),
                }],
            },
        )
        .await
        .unwrap();
    s.clock.advance_days(91);
    assert_eq!(s.broker.sweep_retention(s.clock.now()).unwrap(), 1);
    // the cached token is now long expired; the client renews it
    match alice.get_artifact(&ack.artifact_id.unwrap()).await.unwrap_err() {
        ClientError::Api { status, code, bundle, .. } => {
            assert_eq!(status, 410);
            assert_eq!(code, "artifact_purged");
            let bundle = bundle.unwrap();
            assert!(bundle.purged);
            assert_eq!(bundle.files[0].relative_path, "out/report.json");
        }
        other => panic!("{other:?}"),
    }
}

#[tokio::test]
async fn raw_requests_are_validated() {
    let s = serve().await;
    let http = reqwest::Client::new();

    let resp = http.get(format!("{}/v1/runs", s.url)).send().await.unwrap();
    assert_eq!(resp.status(), 401);

    let token = s.broker.issue_token("alice-ci", "alice-secret").unwrap().token;
    let resp = http
        .post(format!("{}/v1/endpoints", s.url))
        .header("Authorization", format!("Bearer {token}"))
        .body(r#"{"display_name":"x","mode":"multi_user","protected":true}"#)
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 400);
    let body: ErrorBody = decode(&resp.bytes().await.unwrap()).unwrap();
    assert_eq!(body.error_code, "invalid_descriptor");

    let resp = http
        .post(format!("{}/v1/token", s.url))
        .body(r#"{"client_id":"a","client_secret":"b","extra":1}"#)
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 400);
    let body: ErrorBody = decode(&resp.bytes().await.unwrap()).unwrap();
    assert_eq!(body.error_code, "schema_error");
    assert!(body.message.contains("extra"), "{}", body.message);

    let resp = http
        .get(format!("{}/v1/runs/not-a-uuid", s.url))
        .header("Authorization", format!("Bearer {token}"))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 400);

    let resp = http
        .get(format!("{}/v1/runs/{}", s.url, RunId::new()))
        .header("Authorization", format!("Bearer {token}"))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 404);

    let resp = http
        .post(format!("{}/v1/agent/{}/poll", s.url, EndpointId::new()))
        .header("Authorization", "Agent nope")
        .body(r#"{"max_n":1}"#)
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 404);
}

#[tokio::test]
async fn wrong_agent_key_is_401() {
    let s = serve().await;
    let alice = UserClient::new(&s.url, "alice-ci", "alice-secret").unwrap();
    let reg = alice.register_endpoint(&open_descriptor()).await.unwrap();
    let forged = AgentClient::new(&s.url, reg.endpoint_id, "forged", Duration::from_secs(5)).unwrap();
    let err = forged.poll(1, 0).await.unwrap_err();
    assert!(err.is_auth());
    assert_eq!(err.code(), "invalid_agent_key");
}
