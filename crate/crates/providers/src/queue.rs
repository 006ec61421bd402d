use std::collections::VecDeque;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};

/// Multi-producer multi-consumer FIFO shared by an agent and its workers.
#[derive(Debug)]
pub struct WorkQueue<T> {
    items: Mutex<Inner<T>>,
    ready: Condvar,
}

#[derive(Debug)]
struct Inner<T> {
    queue: VecDeque<T>,
    closed: bool,
}

impl<T> Default for WorkQueue<T> {
    fn default() -> Self {
        WorkQueue {
            items: Mutex::new(Inner {
                queue: VecDeque::new(),
                closed: false,
            }),
            ready: Condvar::new(),
        }
    }
}

impl<T> WorkQueue<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the item back if the queue is closed.
    pub fn push(&self, item: T) -> Result<(), T> {
        let mut inner = self.items.lock();
        if inner.closed {
            return Err(item);
        }
        inner.queue.push_back(item);
        self.ready.notify_one();
        Ok(())
    }

    /// Waits up to `timeout` for an item. `None` on timeout or once closed and drained.
    pub fn pop_timeout(&self, timeout: Duration) -> Option<T> {
        let mut inner = self.items.lock();
        if inner.queue.is_empty() && !inner.closed {
            self.ready.wait_for(&mut inner, timeout);
        }
        inner.queue.pop_front()
    }

    pub fn try_pop(&self) -> Option<T> {
        self.items.lock().queue.pop_front()
    }

    pub fn len(&self) -> usize {
        self.items.lock().queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn close(&self) {
        self.items.lock().closed = true;
        self.ready.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.items.lock().closed
    }

    /// Removes and returns everything still queued.
    pub fn drain(&self) -> Vec<T> {
        self.items.lock().queue.drain(..).collect()
    }
}
