//! Execution providers for site agents.
//!
//! A provider turns queued work into running workers. The local provider
//! starts `pilot_size` threads on the agent host. The batch provider submits
//! a pilot job through scheduler command templates and, once the scheduler
//! reports it running, lets `pilot_size` workers drain the shared queue, so
//! many tasks ride one allocation. [`sim::SimScheduler`] stands in for a real
//! scheduler in tests and demos.

pub mod batch;
pub mod error;
pub mod local;
pub mod pilot;
pub mod queue;
pub mod sim;

pub use batch::{
    BatchSpec, CommandScheduler, PilotJob, PilotState, ProviderKind, ProviderSpec, Scheduler,
};
pub use error::{ProviderError, Result};
pub use local::{Executor, LocalPool, WorkerSet};
pub use pilot::{BatchPool, BatchPoolConfig, ProvisionFailure};
pub use queue::WorkQueue;
pub use sim::{SimConfig, SimScheduler, SimStore, TimeMode};
