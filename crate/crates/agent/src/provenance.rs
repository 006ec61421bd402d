use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use ci_protocol::policy::is_secret_env_key;
use ci_protocol::{ProvenanceSnapshot, Timestamp};

use crate::exec::run_process;

pub const UNKNOWN: &str = "unknown";

fn uname() -> Option<libc::utsname> {
    // SAFETY: utsname is plain old data and uname only writes into it.
    unsafe {
        let mut u: libc::utsname = std::mem::zeroed();
        (libc::uname(&mut u) == 0).then_some(u)
    }
}

fn field(raw: &[libc::c_char]) -> String {
    let bytes: Vec<u8> = raw.iter().take_while(|&&c| c != 0).map(|&c| c as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

pub fn hostname() -> String {
    uname().map(|u| field(&u.nodename)).unwrap_or_else(|| UNKNOWN.into())
}

/// `PRETTY_NAME` from os-release plus kernel name, release and machine.
pub fn os_description() -> String {
    let distro = std::fs::read_to_string("/etc/os-release")
        .ok()
        .and_then(|text| {
            text.lines()
                .find_map(|l| l.strip_prefix("PRETTY_NAME="))
                .map(|v| v.trim_matches('"').to_string())
        });
    let kernel = uname().map(|u| format!("{} {} {}", field(&u.sysname), field(&u.release), field(&u.machine)));
    match (distro, kernel) {
        (Some(d), Some(k)) => format!("{d}; {k}"),
        (Some(d), None) => d,
        (None, Some(k)) => k,
        (None, None) => UNKNOWN.into(),
    }
}

/// First non-empty line of `<tool> --version`, or "unknown".
pub fn tool_version(tool: &str, env: &BTreeMap<String, String>) -> String {
    let out = run_process(tool, &["--version".into()], Path::new("/"), env, Duration::from_secs(15));
    match out {
        Ok(e) if e.exit_code == 0 && !e.timed_out => {
            let text = String::from_utf8_lossy(if e.stdout.is_empty() { &e.stderr } else { &e.stdout }).into_owned();
            text.lines()
                .map(str::trim)
                .find(|l| !l.is_empty())
                .map(str::to_string)
                .unwrap_or_else(|| UNKNOWN.into())
        }
        _ => UNKNOWN.into(),
    }
}

/// Snapshot of the host and of `env` with secret-looking keys removed.
pub fn capture_provenance(env: &BTreeMap<String, String>, tools: &[String]) -> ProvenanceSnapshot {
    ProvenanceSnapshot {
        hostname: hostname(),
        os_description: os_description(),
        captured_env: env
            .iter()
            .filter(|(k, _)| !is_secret_env_key(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect(),
        tool_versions: tools.iter().map(|t| (t.clone(), tool_version(t, env))).collect(),
        captured_at: Timestamp::now(),
        repo_commit: None,
    }
}
