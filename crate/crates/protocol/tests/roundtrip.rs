use std::collections::{BTreeMap, BTreeSet};

use ci_protocol::api::*;
use ci_protocol::*;
use proptest::collection::{btree_map, btree_set, vec};
use proptest::prelude::*;
use uuid::Uuid;

fn uuid() -> impl Strategy<Value = Uuid> {
    any::<u128>().prop_map(|n| uuid::Builder::from_random_bytes(n.to_le_bytes()).into_uuid())
}

fn endpoint_id() -> impl Strategy<Value = EndpointId> {
    uuid().prop_map(EndpointId::from_uuid)
}

fn function_id() -> impl Strategy<Value = FunctionId> {
    uuid().prop_map(FunctionId::from_uuid)
}

fn ts() -> impl Strategy<Value = Timestamp> {
    (0i64..4_000_000_000_000).prop_map(Timestamp)
}

fn text() -> impl Strategy<Value = String> {
    any::<String>()
}

fn string_map() -> impl Strategy<Value = BTreeMap<String, String>> {
    btree_map(text(), text(), 0..4)
}

fn task_spec() -> impl Strategy<Value = TaskSpec> {
    (
        endpoint_id(),
        prop_oneof![
            "[a-z][a-z0-9 ]{0,20}".prop_map(|c| (TaskKind::Shell, Some(c), None)),
            function_id().prop_map(|f| (TaskKind::Function, None, Some(f))),
        ],
        vec(text(), 0..3),
        string_map(),
        proptest::option::of(("[a-z:/._]{1,20}", "[a-z0-9]{1,10}")),
        1u64..100_000,
        text(),
    )
        .prop_map(
            |(endpoint_id, (kind, shell_cmd, function_id), args, env, repo, timeout, who)| {
                TaskSpec {
                    endpoint_id,
                    kind,
                    shell_cmd,
                    function_id,
                    args,
                    env,
                    repo: repo.map(|(url, git_ref)| RepoRef { url, git_ref }),
                    timeout_seconds: timeout,
                    requested_by: who,
                }
            },
        )
}

fn provenance() -> impl Strategy<Value = ProvenanceSnapshot> {
    (
        text(),
        text(),
        btree_map("[A-Z_]{1,8}", text(), 0..4),
        string_map(),
        ts(),
        proptest::option::of("[0-9a-f]{40}"),
    )
        .prop_map(|(hostname, os, env, tools, at, commit)| ProvenanceSnapshot {
            hostname,
            os_description: os,
            captured_env: env
                .into_iter()
                .filter(|(k, _)| !policy::is_secret_env_key(k))
                .collect(),
            tool_versions: tools,
            captured_at: at,
            repo_commit: commit,
        })
}

fn task_result(exit_code: i32) -> impl Strategy<Value = TaskResult> {
    (
        text(),
        any::<bool>(),
        text(),
        any::<bool>(),
        0.0f64..1.0e6,
        proptest::option::of(provenance()),
        proptest::option::of("[a-z_]{1,20}"),
    )
        .prop_map(
            move |(stdout, so_t, stderr, se_t, duration, prov, reason)| TaskResult {
                exit_code,
                stdout,
                stdout_truncated: so_t,
                stderr,
                stderr_truncated: se_t,
                duration_seconds: duration,
                provenance: prov,
                failure_reason: reason,
            },
        )
}

/// A random legal lifecycle: walk the graph from `submitted` choosing successors.
fn lifecycle() -> impl Strategy<Value = Vec<Transition>> {
    (vec(any::<u8>(), 0..8), ts(), vec(0i64..10_000, 8), text()).prop_map(
        |(choices, start, gaps, actor)| {
            let mut at = start;
            let mut path = vec![Transition {
                from: None,
                to: RunState::Submitted,
                at,
                actor: actor.clone(),
            }];
            let mut current = RunState::Submitted;
            for (choice, gap) in choices.into_iter().zip(gaps) {
                let next = current.successors();
                if next.is_empty() {
                    break;
                }
                let to = next[choice as usize % next.len()];
                at = at.plus_millis(gap);
                path.push(Transition {
                    from: Some(current),
                    to,
                    at,
                    actor: actor.clone(),
                });
                current = to;
            }
            path
        },
    )
}

fn task_run() -> impl Strategy<Value = TaskRun> {
    (lifecycle(), task_spec(), uuid(), proptest::option::of(text())).prop_flat_map(
        |(transitions, spec, run_uuid, claimed_by)| {
            let state = transitions.last().unwrap().to;
            let reached_running = transitions.iter().any(|t| t.to == RunState::Running);
            let exit = match state {
                RunState::Completed => Just(0).boxed(),
                RunState::Failed if reached_running => (1i32..255).boxed(),
                _ => (-1i32..255).boxed(),
            };
            let finished = matches!(state, RunState::Completed | RunState::Failed);
            (
                Just(transitions),
                Just(spec),
                Just(run_uuid),
                Just(claimed_by),
                exit.prop_flat_map(task_result),
                Just(finished),
                proptest::option::of(uuid()),
            )
        },
    )
    .prop_map(
        |(transitions, spec, run_uuid, claimed_by, result, finished, artifact)| TaskRun {
            run_id: RunId::from_uuid(run_uuid),
            spec,
            state: transitions.last().unwrap().to,
            transitions,
            result: finished.then_some(result),
            claimed_by,
            artifact_id: artifact.map(ArtifactId::from_uuid),
        },
    )
}

fn endpoint_record() -> impl Strategy<Value = EndpointRecord> {
    (
        endpoint_id(),
        text(),
        any::<bool>(),
        proptest::option::of("[a-z]{1,8}@[a-z]{1,8}"),
        btree_set(function_id(), 0..3),
        proptest::option::of(text()),
        "[0-9a-f]{64}",
        any::<bool>(),
        proptest::option::of(ts()),
        ts(),
    )
        .prop_map(
            |(id, name, multi, reviewer, allow_list, template_id, hash, online, hb, reg)| {
                EndpointRecord {
                    endpoint_id: id,
                    display_name: name,
                    mode: if multi {
                        EndpointMode::MultiUser
                    } else {
                        EndpointMode::SingleUser
                    },
                    protected: reviewer.is_some(),
                    reviewer,
                    allow_list,
                    template_id,
                    agent_key_hash: hash,
                    status: if online {
                        EndpointStatus::Online
                    } else {
                        EndpointStatus::Offline
                    },
                    last_heartbeat: hb,
                    registered_at: reg,
                }
            },
        )
}

fn audit_event() -> impl Strategy<Value = AuditEvent> {
    let actions = [
        AuditAction::TokenIssued,
        AuditAction::EndpointRegistered,
        AuditAction::FunctionRegistered,
        AuditAction::TaskSubmitted,
        AuditAction::ApprovalGranted,
        AuditAction::ApprovalRejected,
        AuditAction::TaskClaimed,
        AuditAction::StateChanged,
        AuditAction::ResultReported,
        AuditAction::ArtifactStored,
        AuditAction::ArtifactPurged,
        AuditAction::AuthFailure,
    ];
    (any::<u64>(), ts(), text(), 0..actions.len(), text(), string_map()).prop_map(
        move |(seq, timestamp, actor, action, subject, details)| AuditEvent {
            seq,
            timestamp,
            actor,
            action: actions[action],
            subject,
            details,
        },
    )
}

fn artifact_bundle() -> impl Strategy<Value = ArtifactBundle> {
    (
        uuid(),
        uuid(),
        vec(("[a-z/._]{1,20}", any::<u64>(), "[0-9a-f]{64}"), 0..4),
        ts(),
        1u32..1000,
        any::<bool>(),
    )
        .prop_map(|(a, r, files, created_at, days, purged)| ArtifactBundle {
            artifact_id: ArtifactId::from_uuid(a),
            run_id: RunId::from_uuid(r),
            files: files
                .into_iter()
                .map(|(relative_path, byte_size, digest)| ArtifactFile {
                    relative_path,
                    byte_size,
                    digest,
                })
                .collect(),
            created_at,
            retention_days: days,
            purged,
        })
}

fn assert_round_trip<T: WireMessage + PartialEq + std::fmt::Debug>(value: &T) {
    let bytes = encode(value);
    let back: T = decode(&bytes).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&bytes)));
    assert_eq!(&back, value);
    assert_eq!(encode(&back), bytes, "re-encoding is not byte-identical");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn task_runs_round_trip_byte_identical(run in task_run()) {
        assert_round_trip(&run);
        prop_assert_eq!(replay_path(&run.transitions).unwrap(), run.state);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn endpoint_records_round_trip(record in endpoint_record()) {
        assert_round_trip(&record);
    }

    #[test]
    fn audit_events_round_trip(event in audit_event()) {
        assert_round_trip(&event);
    }

    #[test]
    fn artifact_bundles_round_trip(bundle in artifact_bundle()) {
        assert_round_trip(&bundle);
    }

    #[test]
    fn provenance_round_trips(snapshot in provenance()) {
        assert_round_trip(&snapshot);
    }

    #[test]
    fn claimed_tasks_round_trip(spec in task_spec(), run in uuid(), payload in proptest::option::of(text())) {
        let claim = ClaimedTask { run_id: RunId::from_uuid(run), spec, payload };
        assert_round_trip(&PollResponse { tasks: vec![claim] });
    }

    #[test]
    fn result_reports_round_trip(result in task_result(3), files in vec(("[a-z.]{1,10}", "[A-Za-z0-9+/]{0,16}"), 0..3)) {
        let report = ResultReport {
            terminal_state: RunState::Failed,
            result,
            artifact_files: files
                .into_iter()
                .map(|(relative_path, content_b64)| FileUpload { relative_path, content_b64 })
                .collect(),
        };
        assert_round_trip(&report);
    }

    /// Random edits to a valid run either still decode to a valid run or fail
    /// with a schema error; decoding never panics.
    #[test]
    fn mutated_runs_never_decode_invalid(run in task_run(), to in 0usize..10) {
        let mut broken = run.clone();
        broken.state = RunState::ALL[to];
        match decode::<TaskRun>(&encode(&broken)) {
            Ok(back) => prop_assert_eq!(replay_path(&back.transitions).unwrap(), back.state),
            Err(err) => prop_assert!(!err.field.is_empty()),
        }
    }
}

#[test]
fn bearer_token_expiry_must_follow_issue() {
    let token = BearerToken {
        token: "t".into(),
        subject: "alice".into(),
        issued_at: Timestamp(10),
        expires_at: Timestamp(10),
    };
    assert_eq!(decode::<BearerToken>(&encode(&token)).unwrap_err().field, "expires_at");
}

#[test]
fn result_on_unfinished_run_rejected() {
    let run = TaskRun {
        run_id: RunId::new(),
        spec: TaskSpec::shell(EndpointId::new(), "true"),
        state: RunState::Submitted,
        transitions: vec![Transition {
            from: None,
            to: RunState::Submitted,
            at: Timestamp(1),
            actor: "alice".into(),
        }],
        result: Some(TaskResult::aborted("x", "y")),
        claimed_by: None,
        artifact_id: None,
    };
    assert_eq!(decode::<TaskRun>(&encode(&run)).unwrap_err().field, "result");
}

#[test]
fn allow_list_set_round_trips_empty() {
    let desc = EndpointDescriptor {
        display_name: "cloud".into(),
        mode: EndpointMode::SingleUser,
        protected: false,
        reviewer: None,
        allow_list: BTreeSet::new(),
        template: None,
    };
    let back: EndpointDescriptor = decode(&encode(&desc)).unwrap();
    assert!(back.allow_list.is_empty());
}
