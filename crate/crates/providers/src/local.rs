use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crate::error::{ProviderError, Result};
use crate::queue::WorkQueue;

/// Runs one queued item. Implementations report results themselves.
pub type Executor<T> = Arc<dyn Fn(T) + Send + Sync>;

/// A set of worker threads pulling from one queue until told to stop.
pub struct WorkerSet {
    stop: Arc<AtomicBool>,
    busy: Arc<AtomicUsize>,
    handles: Vec<JoinHandle<()>>,
}

impl WorkerSet {
    pub fn start<T: Send + 'static>(
        n: usize,
        name: &str,
        queue: Arc<WorkQueue<T>>,
        exec: Executor<T>,
        poll: Duration,
    ) -> Result<Self> {
        if n == 0 {
            return Err(ProviderError::SpawnFailure("worker count must be at least 1".into()));
        }
        let stop = Arc::new(AtomicBool::new(false));
        let busy = Arc::new(AtomicUsize::new(0));
        let mut set = WorkerSet {
            stop: stop.clone(),
            busy: busy.clone(),
            handles: Vec::with_capacity(n),
        };
        for i in 0..n {
            let (stop, busy, queue, exec) = (stop.clone(), busy.clone(), queue.clone(), exec.clone());
            let handle = std::thread::Builder::new()
                .name(format!("{name}-{i}"))
                .spawn(move || {
                    while !stop.load(Ordering::Acquire) {
                        let Some(item) = queue.pop_timeout(poll) else {
                            if queue.is_closed() {
                                break;
                            }
                            continue;
                        };
                        busy.fetch_add(1, Ordering::AcqRel);
                        exec(item);
                        busy.fetch_sub(1, Ordering::AcqRel);
                    }
                });
            match handle {
                Ok(h) => set.handles.push(h),
                Err(err) => {
                    set.stop();
                    return Err(ProviderError::SpawnFailure(err.to_string()));
                }
            }
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.handles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.handles.is_empty()
    }

    /// Workers currently inside the executor.
    pub fn busy(&self) -> usize {
        self.busy.load(Ordering::Acquire)
    }

    /// Signals stop and waits. Items being executed finish first.
    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::Release);
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for WorkerSet {
    fn drop(&mut self) {
        self.stop();
    }
}

/// The local provider: `n` workers on the agent host.
pub struct LocalPool<T> {
    queue: Arc<WorkQueue<T>>,
    workers: WorkerSet,
}

impl<T: Send + 'static> LocalPool<T> {
    pub fn start(n: usize, exec: Executor<T>, poll: Duration) -> Result<Self> {
        let queue = Arc::new(WorkQueue::new());
        let workers = WorkerSet::start(n, "local-worker", queue.clone(), exec, poll)?;
        Ok(LocalPool { queue, workers })
    }

    pub fn queue(&self) -> &Arc<WorkQueue<T>> {
        &self.queue
    }

    pub fn worker_count(&self) -> usize {
        self.workers.len()
    }

    pub fn busy(&self) -> usize {
        self.workers.busy()
    }

    pub fn shutdown(&mut self) {
        self.queue.close();
        self.workers.stop();
    }
}

impl<T> Drop for LocalPool<T> {
    fn drop(&mut self) {
        self.queue.close();
    }
}
