use std::collections::BTreeMap;
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use ci_providers::{
    BatchPool, BatchPoolConfig, BatchSpec, CommandScheduler, Executor, LocalPool, PilotState,
    ProviderError, ProvisionFailure, Scheduler, SimConfig, SimScheduler, TimeMode,
};
use parking_lot::Mutex;

const POLL: Duration = Duration::from_millis(20);

fn wait_until(limit: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + limit;
    while Instant::now() < deadline {
        if cond() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(10));
    }
    cond()
}

fn collector() -> (Arc<Mutex<Vec<u32>>>, Executor<u32>) {
    let done = Arc::new(Mutex::new(Vec::new()));
    let d = done.clone();
    (done, Arc::new(move |n: u32| d.lock().push(n)))
}

fn sim_spec() -> BatchSpec {
    BatchSpec {
        submit_cmd_template: "sim-sched submit {script}".into(),
        status_cmd_template: "sim-sched status {job_id}".into(),
        cancel_cmd_template: "sim-sched cancel {job_id}".into(),
        directives: BTreeMap::new(),
        directive_prefix: "#SIM ".into(),
        job_id_regex: None,
    }
}

fn pool_config(dir: &std::path::Path, pilot_size: usize, idle_ttl: Duration) -> BatchPoolConfig {
    BatchPoolConfig {
        pilot_size,
        idle_ttl,
        status_interval: POLL,
        script_dir: dir.to_path_buf(),
        spec: sim_spec(),
        worker_command: "exec ci-agent-worker".into(),
        max_failures: 3,
    }
}

fn wall_sim(queue_delay_ms: i64) -> Arc<SimScheduler> {
    Arc::new(SimScheduler::new(SimConfig {
        queue_delay_ms,
        max_concurrent: 8,
        time_mode: TimeMode::WallClock,
        ..SimConfig::default()
    }))
}

fn no_failures() -> ProvisionFailure<u32> {
    Arc::new(|n, err| panic!("task {n} failed to provision: {err}"))
}

// ---- local -----------------------------------------------------------------------

#[test]
fn single_worker_runs_tasks_in_order() {
    let (done, exec) = collector();
    let mut pool = LocalPool::start(1, exec, POLL).unwrap();
    for n in 0..3 {
        pool.queue().push(n).unwrap();
    }
    assert!(wait_until(Duration::from_secs(5), || done.lock().len() == 3));
    assert_eq!(*done.lock(), [0, 1, 2]);
    pool.shutdown();
}

#[test]
fn four_workers_overlap_four_long_tasks() {
    let single = Duration::from_millis(400);
    let finished = Arc::new(AtomicUsize::new(0));
    let f = finished.clone();
    let exec: Executor<u32> = Arc::new(move |_| {
        std::thread::sleep(single);
        f.fetch_add(1, Ordering::SeqCst);
    });
    let mut pool = LocalPool::start(4, exec, POLL).unwrap();
    assert_eq!(pool.worker_count(), 4);
    let started = Instant::now();
    for n in 0..4 {
        pool.queue().push(n).unwrap();
    }
    assert!(wait_until(Duration::from_secs(10), || finished.load(Ordering::SeqCst) == 4));
    let wall = started.elapsed();
    // about one task's duration, certainly not the sum
    assert!(wall < single * 2, "wall {wall:?}");
    pool.shutdown();
}

#[test]
fn idle_shutdown_is_prompt() {
    let (_, exec) = collector();
    let mut pool = LocalPool::start(3, exec, POLL).unwrap();
    let started = Instant::now();
    pool.shutdown();
    assert!(started.elapsed() < POLL * 3, "{:?}", started.elapsed());
    assert!(pool.queue().push(1).is_err());
}

#[test]
fn zero_workers_is_spawn_failure() {
    let (_, exec) = collector();
    let err = LocalPool::start(0, exec, POLL).err().unwrap();
    assert_eq!(err.code(), "spawn_failure");
}

// ---- batch -----------------------------------------------------------------------

#[test]
fn twenty_tasks_ride_one_pilot() {
    let dir = tempfile::tempdir().unwrap();
    let sim = wall_sim(100);
    let (done, exec) = collector();
    let mut pool = BatchPool::start(
        pool_config(dir.path(), 2, Duration::from_secs(300)),
        sim.clone(),
        exec,
        no_failures(),
    )
    .unwrap();
    for n in 0..20 {
        pool.queue().push(n).unwrap();
    }
    assert!(wait_until(Duration::from_secs(10), || done.lock().len() == 20));
    let mut got = done.lock().clone();
    got.sort();
    assert_eq!(got, (0..20).collect::<Vec<_>>());
    assert!(sim.submission_log().len() <= 2, "{:?}", sim.submission_log());
    let pilots = pool.pilots();
    assert_eq!(pilots[0].worker_count, 2);
    pool.shutdown();
}

#[test]
fn no_pilot_until_work_arrives() {
    let dir = tempfile::tempdir().unwrap();
    let sim = wall_sim(0);
    let (done, exec) = collector();
    let mut pool =
        BatchPool::start(pool_config(dir.path(), 2, Duration::from_secs(300)), sim.clone(), exec, no_failures())
            .unwrap();
    std::thread::sleep(POLL * 5);
    assert!(sim.submission_log().is_empty());
    pool.queue().push(7).unwrap();
    assert!(wait_until(Duration::from_secs(5), || done.lock().len() == 1));
    assert_eq!(sim.submission_log().len(), 1);
    pool.shutdown();
}

#[test]
fn idle_pilot_is_drained_and_replaced_on_demand() {
    let dir = tempfile::tempdir().unwrap();
    let sim = wall_sim(0);
    let (done, exec) = collector();
    let mut pool =
        BatchPool::start(pool_config(dir.path(), 1, Duration::from_millis(200)), sim.clone(), exec, no_failures())
            .unwrap();
    pool.queue().push(1).unwrap();
    assert!(wait_until(Duration::from_secs(5), || done.lock().len() == 1));
    assert!(wait_until(Duration::from_secs(5), || pool
        .pilots()
        .first()
        .is_some_and(|p| p.state == PilotState::Done)));
    assert_eq!(sim.status("sim-1").unwrap(), PilotState::Done);

    pool.queue().push(2).unwrap();
    assert!(wait_until(Duration::from_secs(5), || done.lock().len() == 2));
    assert_eq!(sim.submission_log().len(), 2);
    pool.shutdown();
}


#[test]
fn pilot_cancelled_while_pending_never_runs_work() {
    let dir = tempfile::tempdir().unwrap();
    let sim = wall_sim(60_000);
    let (done, exec) = collector();
    let mut pool =
        BatchPool::start(pool_config(dir.path(), 2, Duration::from_secs(300)), sim.clone(), exec, no_failures())
            .unwrap();
    pool.queue().push(1).unwrap();
    assert!(wait_until(Duration::from_secs(5), || !pool.pilots().is_empty()));
    pool.shutdown();
    assert!(done.lock().is_empty());
    assert_eq!(sim.status("sim-1").unwrap(), PilotState::Failed);
}

#[test]
fn walltime_ended_pilot_is_resubmitted() {
    let dir = tempfile::tempdir().unwrap();
    let sim = wall_sim(0);
    let mut config = pool_config(dir.path(), 1, Duration::from_secs(300));
    config.spec.directives.insert("walltime".into(), "0.3".into());
    let done = Arc::new(Mutex::new(Vec::new()));
    let d = done.clone();
    let exec: Executor<u32> = Arc::new(move |n| {
        std::thread::sleep(Duration::from_millis(150));
        d.lock().push(n);
    });
    let mut pool = BatchPool::start(config, sim.clone(), exec, no_failures()).unwrap();
    for n in 0..6 {
        pool.queue().push(n).unwrap();
    }
    assert!(wait_until(Duration::from_secs(15), || done.lock().len() == 6));
    assert!(sim.submission_log().len() >= 2);
    let script = std::fs::read_to_string(&sim.submission_log()[0].script).unwrap();
    assert!(script.contains("#SIM walltime=0.3"), "{script}");
    pool.shutdown();
}

#[test]
fn failing_submissions_fail_the_queued_work() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = pool_config(dir.path(), 2, Duration::from_secs(300));
    config.spec.submit_cmd_template = "echo nope >&2; false {script}".into();
    let scheduler = Arc::new(CommandScheduler::new(config.spec.clone()).unwrap());
    let failed = Arc::new(Mutex::new(Vec::new()));
    let f = failed.clone();
    let on_failure: ProvisionFailure<u32> = Arc::new(move |n, err: &ProviderError| {
        f.lock().push((n, err.code()));
    });
    let (done, exec) = collector();
    let mut pool = BatchPool::start(config, scheduler, exec, on_failure).unwrap();
    pool.queue().push(1).unwrap();
    pool.queue().push(2).unwrap();
    assert!(wait_until(Duration::from_secs(5), || failed.lock().len() == 2));
    assert!(failed.lock().iter().all(|(_, code)| *code == "submit_failure"));
    assert!(done.lock().is_empty());
    pool.shutdown();
}

#[test]
fn invalid_template_rejected_at_start() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = pool_config(dir.path(), 2, Duration::from_secs(300));
    config.spec.submit_cmd_template = "sbatch".into();
    let (_, exec) = collector();
    let err = BatchPool::start(config, wall_sim(0), exec, no_failures()).err().unwrap();
    assert_eq!(err.code(), "invalid_template");
}

/// A toy scheduler CLI in shell: job files under $Q, ids from a counter.
const FAKE_SCHED: &str = r#"#!/bin/sh
set -e
cmd=$1; shift
case $cmd in
  submit)
    n=$(( $(cat "$Q/counter" 2>/dev/null || echo 0) + 1 ))
    echo $n > "$Q/counter"
    cp "$1" "$Q/job-$n.sh"
    echo RUNNING > "$Q/job-$n.state"
    echo "Submitted batch job $n"
    ;;
  status) cat "$Q/job-$1.state" ;;
  cancel) echo CANCELLED > "$Q/job-$1.state" ;;
esac
"#;

#[test]
fn command_templates_drive_a_scheduler_cli() {
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("fake-sched");
    std::fs::write(&bin, FAKE_SCHED).unwrap();
    Command::new("chmod").arg("+x").arg(&bin).status().unwrap();
    let q = dir.path().join("q");
    std::fs::create_dir(&q).unwrap();
    let b = bin.to_str().unwrap();
    let mut spec = sim_spec();
    spec.submit_cmd_template = format!("{b} submit {{script}}");
    spec.status_cmd_template = format!("{b} status {{job_id}}");
    spec.cancel_cmd_template = format!("{b} cancel {{job_id}}");
    let scheduler = CommandScheduler::new(spec).unwrap().with_env("Q", q.to_str().unwrap());

    let script = dir.path().join("launch it.sh");
    std::fs::write(&script, "#!/bin/sh\n").unwrap();
    let id = scheduler.submit(script.to_str().unwrap()).unwrap();
    assert_eq!(id, "1");
    assert!(q.join("job-1.sh").exists());
    assert_eq!(scheduler.status(&id).unwrap(), PilotState::Running);
    scheduler.cancel(&id).unwrap();
    assert_eq!(scheduler.status(&id).unwrap(), PilotState::Failed);
    assert_eq!(scheduler.status("99").unwrap_err().code(), "command_failure");
}

// ---- equivalence -----------------------------------------------------------------

fn shell_executor() -> (Arc<Mutex<Vec<(i32, String)>>>, Executor<String>) {
    let results = Arc::new(Mutex::new(Vec::new()));
    let r = results.clone();
    let exec: Executor<String> = Arc::new(move |cmd: String| {
        let out = Command::new("sh").arg("-c").arg(&cmd).output().unwrap();
        r.lock().push((
            out.status.code().unwrap_or(-1),
            String::from_utf8_lossy(&out.stdout).into_owned(),
        ));
    });
    (results, exec)
}

#[test]
fn local_and_batch_produce_the_same_results() {
    let tasks: Vec<String> = (0..12)
        .map(|i| format!("echo task-{i}; exit {}", i % 3))
        .collect();

    let (local_results, exec) = shell_executor();
    let mut local = LocalPool::start(3, exec, POLL).unwrap();
    for t in &tasks {
        local.queue().push(t.clone()).unwrap();
    }
    assert!(wait_until(Duration::from_secs(10), || local_results.lock().len() == tasks.len()));
    local.shutdown();

    let dir = tempfile::tempdir().unwrap();
    let (batch_results, exec) = shell_executor();
    let mut batch = BatchPool::start(
        pool_config(dir.path(), 3, Duration::from_secs(300)),
        wall_sim(50),
        exec,
        Arc::new(|_, err| panic!("{err}")),
    )
    .unwrap();
    for t in &tasks {
        batch.queue().push(t.clone()).unwrap();
    }
    assert!(wait_until(Duration::from_secs(10), || batch_results.lock().len() == tasks.len()));
    batch.shutdown();

    let mut a = local_results.lock().clone();
    let mut b = batch_results.lock().clone();
    a.sort();
    b.sort();
    assert_eq!(a, b);
}
