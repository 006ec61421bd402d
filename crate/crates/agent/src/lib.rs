//! Site agent. It holds only outbound connections to the broker, claims
//! tasks for its endpoint, maps each submitter to a local account, and runs
//! the task in that account's workspace through the configured provider.

pub mod agent;
pub mod config;
pub mod context;
pub mod error;
pub mod exec;
pub mod identity;
pub mod inflight;
pub mod provenance;
pub mod runner;
pub mod staging;

pub use agent::{backoff_delay, Agent, RunningAgent, StopHandle};
pub use config::{AgentConfig, TaskNetwork, TemplateConfig};
pub use context::{ContextSettings, Job, UserEndpointContext, UserEndpoints};
pub use error::{AgentError, Result};
pub use identity::IdentityMap;
pub use provenance::capture_provenance;
pub use runner::{run_task, TaskContext, TaskOutcome};
pub use staging::{stage_repo, Staged};
