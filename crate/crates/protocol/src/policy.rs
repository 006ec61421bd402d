//! Rules shared by the broker and agents so both sides decide identically.

use std::collections::BTreeSet;

use crate::ids::FunctionId;
use crate::types::{TaskKind, TaskResult, TaskSpec};

/// Per-stream cap on returned stdout/stderr.
pub const OUTPUT_LIMIT_BYTES: usize = 1 << 20;

/// Default artifact retention.
pub const DEFAULT_RETENTION_DAYS: u32 = 90;

/// Substrings that mark an environment variable as secret (matched case-insensitively).
pub const SECRET_ENV_PATTERNS: [&str; 7] = [
    "SECRET",
    "TOKEN",
    "KEY",
    "PASSWORD",
    "PASSWD",
    "CREDENTIAL",
    "AUTH",
];

/// Failure reasons meaning the user command never started.
pub const PRE_EXECUTION_FAILURES: [&str; 6] = [
    "staging_failure",
    "provision_failure",
    "unmapped_identity",
    "function_not_allowed",
    "workspace_creation_failure",
    "agent_restart",
];

/// Whether a reported result came from actually running the command.
pub fn reached_execution(result: &TaskResult) -> bool {
    match result.failure_reason.as_deref() {
        Some(reason) => !PRE_EXECUTION_FAILURES.contains(&reason),
        None => true,
    }
}

pub fn is_secret_env_key(key: &str) -> bool {
    let upper = key.to_ascii_uppercase();
    SECRET_ENV_PATTERNS.iter().any(|p| upper.contains(p))
}

/// Whether an endpoint with `allow_list` may run `spec`.
///
/// An empty list is unrestricted. A non-empty list admits only function tasks
/// naming a listed function; shell tasks are refused outright.
pub fn allow_list_permits(allow_list: &BTreeSet<FunctionId>, spec: &TaskSpec) -> bool {
    if allow_list.is_empty() {
        return true;
    }
    match (spec.kind, spec.function_id) {
        (TaskKind::Function, Some(id)) => allow_list.contains(&id),
        _ => false,
    }
}

/// Lossy UTF-8 conversion capped at `limit` bytes on a char boundary.
pub fn truncate_output(bytes: &[u8], limit: usize) -> (String, bool) {
    let text = String::from_utf8_lossy(bytes);
    if text.len() <= limit && bytes.len() <= limit {
        return (text.into_owned(), false);
    }
    let mut cut = limit.min(text.len());
    while !text.is_char_boundary(cut) {
        cut -= 1;
    }
    (text[..cut].to_string(), true)
}
