//! Run lifecycle state machine.
//!
//! ```text
//! submitted ──► pending_approval ──► queued ──► claimed ──► staging ──► running ──► completed
//!     │               │   │                                    │           │
//!     └──► queued     │   └──► expired                         └► failed   └──► failed
//!                     └──► rejected
//! ```
//!
//! `completed`, `failed`, `rejected` and `expired` are terminal.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ids::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Submitted,
    PendingApproval,
    Queued,
    Claimed,
    Staging,
    Running,
    Completed,
    Failed,
    Rejected,
    Expired,
}

impl RunState {
    pub const ALL: [RunState; 10] = [
        RunState::Submitted,
        RunState::PendingApproval,
        RunState::Queued,
        RunState::Claimed,
        RunState::Staging,
        RunState::Running,
        RunState::Completed,
        RunState::Failed,
        RunState::Rejected,
        RunState::Expired,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            RunState::Completed | RunState::Failed | RunState::Rejected | RunState::Expired
        )
    }

    /// States reachable from `self` in one step.
    pub fn successors(self) -> &'static [RunState] {
        use RunState::*;
        match self {
            Submitted => &[PendingApproval, Queued],
            PendingApproval => &[Queued, Rejected, Expired],
            Queued => &[Claimed],
            Claimed => &[Staging],
            Staging => &[Running, Failed],
            Running => &[Completed, Failed],
            Completed | Failed | Rejected | Expired => &[],
        }
    }

    pub fn as_str(self) -> &'static str {
        use RunState::*;
        match self {
            Submitted => "submitted",
            PendingApproval => "pending_approval",
            Queued => "queued",
            Claimed => "claimed",
            Staging => "staging",
            Running => "running",
            Completed => "completed",
            Failed => "failed",
            Rejected => "rejected",
            Expired => "expired",
        }
    }
}

impl fmt::Display for RunState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RunState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RunState::ALL
            .into_iter()
            .find(|state| state.as_str() == s)
            .ok_or_else(|| format!("unknown run state `{s}`"))
    }
}

/// True iff `current -> next` is an edge of the lifecycle graph.
pub fn validate_transition(current: RunState, next: RunState) -> bool {
    current.successors().contains(&next)
}

/// One recorded step of a run's lifecycle. The creation entry has no `from`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transition {
    pub from: Option<RunState>,
    pub to: RunState,
    pub at: Timestamp,
    pub actor: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PathError {
    #[error("transition list is empty")]
    Empty,
    #[error("first transition must create the run in `submitted`, found {from:?} -> {to}")]
    BadStart { from: Option<RunState>, to: RunState },
    #[error("transition {index} starts from {found:?} but the run was in {expected}")]
    Discontinuous {
        index: usize,
        expected: RunState,
        found: Option<RunState>,
    },
    #[error("transition {index} ({from} -> {to}) is not a legal edge")]
    IllegalEdge {
        index: usize,
        from: RunState,
        to: RunState,
    },
    #[error("transition {index} goes back in time")]
    NonMonotonicTime { index: usize },
}

/// Replays a transition list and returns the state it ends in.
pub fn replay_path(transitions: &[Transition]) -> Result<RunState, PathError> {
    let first = transitions.first().ok_or(PathError::Empty)?;
    if first.from.is_some() || first.to != RunState::Submitted {
        return Err(PathError::BadStart {
            from: first.from,
            to: first.to,
        });
    }
    let mut current = first.to;
    let mut last_at = first.at;
    for (index, step) in transitions.iter().enumerate().skip(1) {
        if step.from != Some(current) {
            return Err(PathError::Discontinuous {
                index,
                expected: current,
                found: step.from,
            });
        }
        if !validate_transition(current, step.to) {
            return Err(PathError::IllegalEdge {
                index,
                from: current,
                to: step.to,
            });
        }
        if step.at < last_at {
            return Err(PathError::NonMonotonicTime { index });
        }
        current = step.to;
        last_at = step.at;
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Edge list written out independently of `successors`.
    const LEGAL: [(RunState, RunState); 9] = [
        (RunState::Submitted, RunState::PendingApproval),
        (RunState::Submitted, RunState::Queued),
        (RunState::PendingApproval, RunState::Queued),
        (RunState::PendingApproval, RunState::Rejected),
        (RunState::PendingApproval, RunState::Expired),
        (RunState::Queued, RunState::Claimed),
        (RunState::Claimed, RunState::Staging),
        (RunState::Staging, RunState::Running),
        (RunState::Staging, RunState::Failed),
    ];

    #[test]
    fn listed_edges() {
        assert!(validate_transition(RunState::Queued, RunState::Claimed));
        assert!(!validate_transition(RunState::Completed, RunState::Running));
    }

    #[test]
    fn brute_force_edge_count() {
        let mut count = 0;
        for from in RunState::ALL {
            for to in RunState::ALL {
                let legal = validate_transition(from, to);
                let expected = LEGAL.contains(&(from, to))
                    || (from == RunState::Running
                        && (to == RunState::Completed || to == RunState::Failed));
                assert_eq!(legal, expected, "{from} -> {to}");
                if legal {
                    count += 1;
                }
            }
        }
        // Nine edges from the listed graph plus running -> {completed, failed}.
        assert_eq!(count, 11);
    }

    #[test]
    fn terminal_states_have_no_exits() {
        for state in RunState::ALL.into_iter().filter(|s| s.is_terminal()) {
            for next in RunState::ALL {
                assert!(!validate_transition(state, next));
            }
        }
    }

    #[test]
    fn state_names_round_trip() {
        for state in RunState::ALL {
            assert_eq!(state.as_str().parse::<RunState>().unwrap(), state);
            let json = serde_json::to_string(&state).unwrap();
            assert_eq!(json, format!("\"{}\"", state.as_str()));
        }
    }

    fn step(from: Option<RunState>, to: RunState, at: i64) -> Transition {
        Transition {
            from,
            to,
            at: Timestamp(at),
            actor: "system".into(),
        }
    }

    #[test]
    fn replay_accepts_legal_path() {
        let path = vec![
            step(None, RunState::Submitted, 1),
            step(Some(RunState::Submitted), RunState::Queued, 1),
            step(Some(RunState::Queued), RunState::Claimed, 2),
        ];
        assert_eq!(replay_path(&path).unwrap(), RunState::Claimed);
    }

    #[test]
    fn replay_rejects_skips_and_gaps() {
        let skip = vec![
            step(None, RunState::Submitted, 1),
            step(Some(RunState::Submitted), RunState::Running, 2),
        ];
        assert!(matches!(
            replay_path(&skip),
            Err(PathError::IllegalEdge { index: 1, .. })
        ));
        let gap = vec![
            step(None, RunState::Submitted, 1),
            step(Some(RunState::Queued), RunState::Claimed, 2),
        ];
        assert!(matches!(
            replay_path(&gap),
            Err(PathError::Discontinuous { .. })
        ));
        assert_eq!(replay_path(&[]), Err(PathError::Empty));
    }
}
