//! The CI side: authenticate, submit a task to one endpoint or a matrix of
//! endpoints, wait, relay output, turn the outcome into an exit code, and
//! publish the run's artifacts and a per-site test timing report.

pub mod durations;
pub mod error;
pub mod inputs;
pub mod matrix;
pub mod publish;
pub mod report;
pub mod step;

pub use durations::{parse_test_durations, parse_test_outcomes, TestOutcome, TestTiming};
pub use error::{AdapterError, Result};
pub use inputs::{parse_matrix, Credentials, Secret, Site, StepInputs, Work};
pub use matrix::{run_matrix, MatrixOutput};
pub use publish::{publish_artifacts, Fetched};
pub use report::{Report, SiteReport, TestEntry};
pub use step::{run_step, Outcome, SiteRun, StepOutput};
