use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use crate::batch::{BatchSpec, PilotJob, PilotState, Scheduler};
use crate::error::{ProviderError, Result};
use crate::local::{Executor, WorkerSet};
use crate::queue::WorkQueue;
use crate::sim::unix_millis;

/// Called with each queued item when no pilot can be provisioned.
pub type ProvisionFailure<T> = Arc<dyn Fn(T, &ProviderError) + Send + Sync>;

#[derive(Debug, Clone)]
pub struct BatchPoolConfig {
    pub pilot_size: usize,
    /// A running pilot with no queued or active work for this long is cancelled.
    pub idle_ttl: Duration,
    /// Scheduler status polling cadence; also the workers' queue wait.
    pub status_interval: Duration,
    /// Launch scripts are written here.
    pub script_dir: PathBuf,
    pub spec: BatchSpec,
    /// Command the launch script would run on the allocation.
    pub worker_command: String,
    /// Consecutive submit or status failures before queued work is failed.
    pub max_failures: u32,
}

impl BatchPoolConfig {
    pub const DEFAULT_IDLE_TTL: Duration = Duration::from_secs(300);
}

struct Shared<T> {
    queue: Arc<WorkQueue<T>>,
    history: Mutex<Vec<PilotJob>>,
    stop: AtomicBool,
}

/// Batch provider. One manager thread owns the pilot lifecycle: it submits
/// a pilot when work is queued and none is alive, starts `pilot_size`
/// workers when the scheduler reports it running, and cancels it after
/// `idle_ttl` without work. Workers stop taking new items once their pilot
/// ends; a fresh pilot is submitted if work remains.
pub struct BatchPool<T> {
    shared: Arc<Shared<T>>,
    manager: Option<JoinHandle<()>>,
}

struct Active {
    job: PilotJob,
    workers: Option<WorkerSet>,
    idle_since: Instant,
}

impl<T: Send + 'static> BatchPool<T> {
    pub fn start(
        config: BatchPoolConfig,
        scheduler: Arc<dyn Scheduler>,
        exec: Executor<T>,
        on_failure: ProvisionFailure<T>,
    ) -> Result<Self> {
        config.spec.validate()?;
        if config.pilot_size == 0 {
            return Err(ProviderError::InvalidTemplate("pilot_size must be at least 1".into()));
        }
        std::fs::create_dir_all(&config.script_dir)?;
        let shared = Arc::new(Shared {
            queue: Arc::new(WorkQueue::new()),
            history: Mutex::new(Vec::new()),
            stop: AtomicBool::new(false),
        });
        let s = shared.clone();
        let manager = std::thread::Builder::new()
            .name("pilot-manager".into())
            .spawn(move || manage(config, scheduler, exec, on_failure, s))
            .map_err(|e| ProviderError::SpawnFailure(e.to_string()))?;
        Ok(BatchPool {
            shared,
            manager: Some(manager),
        })
    }

    pub fn queue(&self) -> &Arc<WorkQueue<T>> {
        &self.shared.queue
    }

    /// Every pilot this pool has submitted, with its last observed state.
    pub fn pilots(&self) -> Vec<PilotJob> {
        self.shared.history.lock().clone()
    }

    /// Cancels the live pilot and joins its workers.
    pub fn shutdown(&mut self) {
        self.shared.stop.store(true, Ordering::Release);
        self.shared.queue.close();
        if let Some(h) = self.manager.take() {
            let _ = h.join();
        }
    }
}

impl<T> Drop for BatchPool<T> {
    fn drop(&mut self) {
        self.shared.stop.store(true, Ordering::Release);
        self.shared.queue.close();
        if let Some(h) = self.manager.take() {
            let _ = h.join();
        }
    }
}

fn record<T>(shared: &Shared<T>, job: &PilotJob) {
    let mut history = shared.history.lock();
    match history.iter_mut().find(|j| j.job_id == job.job_id) {
        Some(existing) => *existing = job.clone(),
        None => history.push(job.clone()),
    }
}

fn manage<T: Send + 'static>(
    config: BatchPoolConfig,
    scheduler: Arc<dyn Scheduler>,
    exec: Executor<T>,
    on_failure: ProvisionFailure<T>,
    shared: Arc<Shared<T>>,
) {
    let mut active: Option<Active> = None;
    let mut failures = 0u32;
    let mut submitted = 0u64;
    loop {
        if shared.stop.load(Ordering::Acquire) {
            if let Some(mut a) = active.take() {
                if !a.job.state.is_finished() {
                    if let Err(err) = scheduler.cancel(&a.job.job_id) {
                        tracing::warn!(job = %a.job.job_id, %err, "cancel on shutdown failed");
                    }
                    a.job.state = PilotState::Done;
                }
                if let Some(mut w) = a.workers.take() {
                    w.stop();
                }
                record(&shared, &a.job);
            }
            return;
        }

        match active.as_mut() {
            None if !shared.queue.is_empty() => {
                submitted += 1;
                match submit_pilot(&config, scheduler.as_ref(), submitted) {
                    Ok(job) => {
                        failures = 0;
                        tracing::info!(job = %job.job_id, workers = job.worker_count, "pilot submitted");
                        record(&shared, &job);
                        active = Some(Active {
                            job,
                            workers: None,
                            idle_since: Instant::now(),
                        });
                    }
                    Err(err) => {
                        failures += 1;
                        tracing::warn!(%err, failures, "pilot submission failed");
                        if failures >= config.max_failures {
                            for item in shared.queue.drain() {
                                on_failure(item, &err);
                            }
                            failures = 0;
                        }
                    }
                }
            }
            None => {}
            Some(a) => match scheduler.status(&a.job.job_id) {
                Ok(state) => {
                    failures = 0;
                    if state != a.job.state {
                        tracing::info!(job = %a.job.job_id, from = %a.job.state, to = %state, "pilot state");
                        a.job.state = state;
                        record(&shared, &a.job);
                    }
                    if state == PilotState::Running && a.workers.is_none() {
                        match WorkerSet::start(
                            a.job.worker_count,
                            &format!("pilot-{}", a.job.job_id),
                            shared.queue.clone(),
                            exec.clone(),
                            config.status_interval,
                        ) {
                            Ok(w) => a.workers = Some(w),
                            Err(err) => tracing::error!(%err, "pilot workers failed to start"),
                        }
                        a.idle_since = Instant::now();
                    }
                    let busy = a.workers.as_ref().map_or(0, WorkerSet::busy);
                    if busy > 0 || !shared.queue.is_empty() {
                        a.idle_since = Instant::now();
                    }
                    if state == PilotState::Running && a.idle_since.elapsed() >= config.idle_ttl {
                        tracing::info!(job = %a.job.job_id, "draining idle pilot");
                        if let Err(err) = scheduler.cancel(&a.job.job_id) {
                            tracing::warn!(job = %a.job.job_id, %err, "cancel failed");
                        }
                        a.job.state = PilotState::Done;
                    }
                    if a.job.state.is_finished() {
                        if let Some(mut w) = a.workers.take() {
                            w.stop();
                        }
                        record(&shared, &a.job);
                        active = None;
                        continue;
                    }
                }
                Err(err) => {
                    failures += 1;
                    tracing::warn!(job = %a.job.job_id, %err, failures, "pilot status failed");
                    if failures >= config.max_failures {
                        // the scheduler no longer knows the job: treat it as gone
                        a.job.state = PilotState::Failed;
                        if let Some(mut w) = a.workers.take() {
                            w.stop();
                        }
                        record(&shared, &a.job);
                        active = None;
                        failures = 0;
                        continue;
                    }
                }
            },
        }
        std::thread::sleep(config.status_interval);
    }
}

fn submit_pilot(config: &BatchPoolConfig, scheduler: &dyn Scheduler, n: u64) -> Result<PilotJob> {
    let path = config
        .script_dir
        .join(format!("pilot-{}-{n}.sh", std::process::id()));
    std::fs::write(&path, config.spec.launch_script(&config.worker_command))?;
    let job_id = scheduler.submit(&path.to_string_lossy())?;
    Ok(PilotJob {
        job_id,
        state: PilotState::Pending,
        worker_count: config.pilot_size,
        submitted_at: unix_millis(),
    })
}
