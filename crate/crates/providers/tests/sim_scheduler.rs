use ci_providers::batch::{PilotState, Scheduler};
use ci_providers::sim::{SimEventKind, SimStore};
use ci_providers::{SimConfig, SimScheduler, TimeMode};
use proptest::prelude::*;

fn virtual_sim(queue_delay_ms: i64, max_concurrent: usize) -> SimScheduler {
    SimScheduler::new(SimConfig {
        queue_delay_ms,
        max_concurrent,
        ..SimConfig::default()
    })
}

#[test]
fn first_job_is_sim_1_and_starts_after_delay() {
    let sim = virtual_sim(5_000, 4);
    let id = sim.submit_text("a.sh", "#!/bin/sh\n").unwrap();
    assert_eq!(id, "sim-1");
    assert_eq!(sim.status(&id).unwrap(), PilotState::Pending);
    sim.tick(4_999);
    assert_eq!(sim.status(&id).unwrap(), PilotState::Pending);
    let events = sim.tick(5_000);
    assert_eq!(events.len(), 1);
    assert_eq!(events[0].kind, SimEventKind::Started);
    assert_eq!(sim.status(&id).unwrap(), PilotState::Running);
}

#[test]
fn second_job_waits_for_the_slot() {
    let sim = virtual_sim(0, 1);
    let a = sim.submit_text("a.sh", "#SIM runtime=10").unwrap();
    let b = sim.submit_text("b.sh", "#SIM runtime=10").unwrap();
    assert_eq!(sim.status(&a).unwrap(), PilotState::Running);
    assert_eq!(sim.status(&b).unwrap(), PilotState::Pending);
    sim.tick(9_999);
    assert_eq!(sim.status(&b).unwrap(), PilotState::Pending);
    sim.tick(10_000);
    assert_eq!(sim.status(&a).unwrap(), PilotState::Done);
    assert_eq!(sim.status(&b).unwrap(), PilotState::Running);
    assert_eq!(sim.job(&b).unwrap().started_at_ms, Some(10_000));
}

#[test]
fn walltime_ends_a_job_as_failed() {
    let sim = virtual_sim(0, 1);
    let a = sim.submit_text("a.sh", "#SIM walltime=2 runtime=5").unwrap();
    sim.tick(2_000);
    assert_eq!(sim.status(&a).unwrap(), PilotState::Failed);
    let b = sim.submit_text("b.sh", "#SIM walltime=5 runtime=2").unwrap();
    sim.tick(4_000);
    assert_eq!(sim.status(&b).unwrap(), PilotState::Done);
}

#[test]
fn default_walltime_applies() {
    let sim = SimScheduler::new(SimConfig {
        default_walltime_ms: Some(1_000),
        ..SimConfig::default()
    });
    let a = sim.submit_text("a.sh", "").unwrap();
    sim.tick(1_000);
    assert_eq!(sim.status(&a).unwrap(), PilotState::Failed);
}

#[test]
fn cancel_before_running_never_starts() {
    let sim = virtual_sim(10_000, 1);
    let a = sim.submit_text("a.sh", "").unwrap();
    sim.cancel(&a).unwrap();
    sim.tick(60_000);
    assert_eq!(sim.status(&a).unwrap(), PilotState::Failed);
    assert!(!sim.trace().iter().any(|e| e.kind == SimEventKind::Started));
}

#[test]
fn cancel_running_frees_slot() {
    let sim = virtual_sim(0, 1);
    let a = sim.submit_text("a.sh", "").unwrap();
    let b = sim.submit_text("b.sh", "").unwrap();
    sim.tick(1_000);
    sim.cancel(&a).unwrap();
    assert_eq!(sim.status(&a).unwrap(), PilotState::Done);
    assert_eq!(sim.status(&b).unwrap(), PilotState::Running);
}

#[test]
fn unknown_job() {
    let sim = virtual_sim(0, 1);
    assert_eq!(sim.status("sim-9").unwrap_err().code(), "unknown_job");
    assert_eq!(sim.cancel("sim-9").unwrap_err().code(), "unknown_job");
}

#[test]
fn submit_reads_script_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pilot.sh");
    std::fs::write(&path, "#!/bin/sh\n#SIM runtime=3\n").unwrap();
    let sim = virtual_sim(0, 1);
    let id = Scheduler::submit(&sim, path.to_str().unwrap()).unwrap();
    assert_eq!(sim.submission_log()[0].script, path.to_str().unwrap());
    sim.tick(3_000);
    assert_eq!(sim.status(&id).unwrap(), PilotState::Done);
    assert_eq!(Scheduler::submit(&sim, "/nonexistent/x.sh").unwrap_err().code(), "submit_failure");
}

#[test]
fn wall_clock_mode_moves_without_ticks() {
    let sim = SimScheduler::new(SimConfig {
        queue_delay_ms: 150,
        time_mode: TimeMode::WallClock,
        ..SimConfig::default()
    });
    let a = sim.submit_text("a.sh", "").unwrap();
    assert_eq!(sim.status(&a).unwrap(), PilotState::Pending);
    std::thread::sleep(std::time::Duration::from_millis(300));
    assert_eq!(sim.status(&a).unwrap(), PilotState::Running);
}

#[test]
fn store_persists_between_invocations() {
    let dir = tempfile::tempdir().unwrap();
    SimStore::init(
        dir.path(),
        SimConfig {
            queue_delay_ms: 1_000,
            max_concurrent: 1,
            ..SimConfig::default()
        },
    )
    .unwrap();
    let script = dir.path().join("p.sh");
    std::fs::write(&script, "#SIM runtime=5").unwrap();
    let id = SimStore::open(dir.path()).unwrap().submit(script.to_str().unwrap()).unwrap();
    assert_eq!(id, "sim-1");
    assert_eq!(SimStore::open(dir.path()).unwrap().status(&id).unwrap(), PilotState::Pending);
    SimStore::open(dir.path()).unwrap().tick(1_000).unwrap();
    assert_eq!(SimStore::open(dir.path()).unwrap().status(&id).unwrap(), PilotState::Running);
    let id2 = SimStore::open(dir.path()).unwrap().submit(script.to_str().unwrap()).unwrap();
    assert_eq!(id2, "sim-2");
    assert_eq!(SimStore::open(dir.path()).unwrap().state().submission_log.len(), 2);
}

#[test]
fn store_serializes_concurrent_submits() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("p.sh");
    std::fs::write(&script, "").unwrap();
    let ids: Vec<String> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let (dir, script) = (dir.path(), script.to_str().unwrap());
                s.spawn(move || SimStore::open(dir).unwrap().submit(script).unwrap())
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut sorted = ids.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), 8);
    assert_eq!(SimStore::open(dir.path()).unwrap().state().submission_log.len(), 8);
}

#[derive(Debug, Clone)]
enum Op {
    Submit { runtime_s: Option<u8>, walltime_s: Option<u8> },
    Tick { ms: u16 },
    Cancel { job: u8 },
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => (proptest::option::of(1u8..20), proptest::option::of(1u8..20))
            .prop_map(|(runtime_s, walltime_s)| Op::Submit { runtime_s, walltime_s }),
        3 => (1u16..5000).prop_map(|ms| Op::Tick { ms }),
        1 => (1u8..12).prop_map(|job| Op::Cancel { job }),
    ]
}

fn run(config: &SimConfig, ops: &[Op]) -> (SimScheduler, usize) {
    let sim = SimScheduler::new(config.clone());
    let mut submits = 0;
    for op in ops {
        match op {
            Op::Submit { runtime_s, walltime_s } => {
                let mut script = String::new();
                if let Some(r) = runtime_s {
                    script.push_str(&format!("#SIM runtime={r}\n"));
                }
                if let Some(w) = walltime_s {
                    script.push_str(&format!("#SIM walltime={w}\n"));
                }
                sim.submit_text(&format!("job{submits}.sh"), &script).unwrap();
                submits += 1;
            }
            Op::Tick { ms } => {
                let now = sim.now_ms();
                sim.tick(now + *ms as i64);
            }
            Op::Cancel { job } => {
                let _ = sim.cancel(&format!("sim-{job}"));
            }
        }
    }
    sim.tick(sim.now_ms() + 120_000);
    (sim, submits)
}

proptest! {
    #[test]
    fn scheduler_contract(
        ops in prop::collection::vec(op(), 1..40),
        delay in 0i64..3000,
        max_concurrent in 1usize..4,
        jitter in 0i64..2000,
        seed in any::<u64>(),
    ) {
        let config = SimConfig { queue_delay_ms: delay, max_concurrent, jitter_ms: jitter, seed, ..SimConfig::default() };
        let (sim, submits) = run(&config, &ops);

        // one log entry per accepted submit
        prop_assert_eq!(sim.submission_log().len(), submits);

        let trace = sim.trace();
        // events in time order
        prop_assert!(trace.windows(2).all(|w| w[0].at_ms <= w[1].at_ms));

        // starts happen in submission order
        let starts: Vec<u64> = trace
            .iter()
            .filter(|e| e.kind == SimEventKind::Started)
            .map(|e| e.job_id[4..].parse().unwrap())
            .collect();
        prop_assert!(starts.windows(2).all(|w| w[0] < w[1]), "{:?}", starts);

        // concurrency cap
        let mut running = 0i64;
        for e in &trace {
            match e.kind {
                SimEventKind::Started => running += 1,
                SimEventKind::Completed | SimEventKind::WalltimeExceeded => running -= 1,
                SimEventKind::Cancelled => {
                    let job = sim.job(&e.job_id).unwrap();
                    if job.started_at_ms.is_some() { running -= 1; }
                }
                SimEventKind::Submitted => {}
            }
            prop_assert!(running <= max_concurrent as i64);
        }

        // no job starts before it is eligible
        for job in sim.snapshot().jobs {
            if let Some(start) = job.started_at_ms {
                prop_assert!(start >= job.eligible_at_ms);
                prop_assert!(job.eligible_at_ms >= job.submitted_at_ms + delay);
                prop_assert!(job.eligible_at_ms <= job.submitted_at_ms + delay + jitter);
            }
        }

        // same seed and config, same trace
        let (again, _) = run(&config, &ops);
        prop_assert_eq!(trace, again.trace());
    }
}
