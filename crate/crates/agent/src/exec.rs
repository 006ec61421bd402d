use std::collections::BTreeMap;
use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use ci_protocol::policy::OUTPUT_LIMIT_BYTES;

/// Captured output of one process.
#[derive(Debug, Clone, PartialEq)]
pub struct Execution {
    /// `-1` when killed by timeout or a signal.
    pub exit_code: i32,
    pub stdout: Vec<u8>,
    pub stdout_truncated: bool,
    pub stderr: Vec<u8>,
    pub stderr_truncated: bool,
    pub duration: Duration,
    pub timed_out: bool,
}

/// Keeps the first `limit` bytes and drains the rest so the writer never blocks.
fn capture(mut pipe: impl Read, limit: usize) -> (Vec<u8>, bool) {
    let mut kept = Vec::new();
    let mut truncated = false;
    let mut buf = [0u8; 8192];
    loop {
        match pipe.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => {
                let room = limit.saturating_sub(kept.len());
                kept.extend_from_slice(&buf[..n.min(room)]);
                truncated |= n > room;
            }
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(_) => break,
        }
    }
    (kept, truncated)
}

/// Credentials a task process switches to before exec.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunAs {
    pub uid: u32,
    pub gid: u32,
}

/// Runs `program args` in its own process group with a clean environment of
/// exactly `env`. On timeout the whole group is killed.
pub fn run_process(
    program: &str,
    args: &[String],
    cwd: &Path,
    env: &BTreeMap<String, String>,
    timeout: Duration,
) -> std::io::Result<Execution> {
    run_process_as(program, args, cwd, env, timeout, None)
}

/// [`run_process`], optionally under other credentials. Supplementary groups
/// are dropped when `run_as` is set.
pub fn run_process_as(
    program: &str,
    args: &[String],
    cwd: &Path,
    env: &BTreeMap<String, String>,
    timeout: Duration,
    run_as: Option<RunAs>,
) -> std::io::Result<Execution> {
    let started = Instant::now();
    let mut cmd = Command::new(program);
    cmd.args(args)
        .current_dir(cwd)
        .env_clear()
        .envs(env)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);
    if let Some(who) = run_as {
        // std drops supplementary groups when root sets a uid
        cmd.gid(who.gid).uid(who.uid);
    }
    let mut child = cmd.spawn()?;
    let pgid = child.id() as libc::pid_t;
    let out = child.stdout.take().expect("piped");
    let err = child.stderr.take().expect("piped");
    let out_reader = std::thread::spawn(move || capture(out, OUTPUT_LIMIT_BYTES));
    let err_reader = std::thread::spawn(move || capture(err, OUTPUT_LIMIT_BYTES));

    let mut timed_out = false;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if started.elapsed() >= timeout {
            timed_out = true;
            // SAFETY: plain syscall on a process group we created.
            unsafe {
                libc::kill(-pgid, libc::SIGKILL);
            }
            break child.wait()?;
        }
        std::thread::sleep(Duration::from_millis(10));
    };
    let duration = started.elapsed();
    // Survivors of a normal exit may still hold the pipes open.
    // SAFETY: as above.
    unsafe {
        libc::kill(-pgid, libc::SIGKILL);
    }
    let (stdout, stdout_truncated) = out_reader.join().unwrap_or_default();
    let (stderr, stderr_truncated) = err_reader.join().unwrap_or_default();
    Ok(Execution {
        exit_code: if timed_out { -1 } else { status.code().unwrap_or(-1) },
        stdout,
        stdout_truncated,
        stderr,
        stderr_truncated,
        duration,
        timed_out,
    })
}

/// Hands a directory tree to `who`. Symlinks are re-owned, not followed.
pub fn chown_tree(root: &Path, who: RunAs) -> std::io::Result<()> {
    for entry in walkdir::WalkDir::new(root) {
        let entry = entry.map_err(std::io::Error::other)?;
        std::os::unix::fs::lchown(entry.path(), Some(who.uid), Some(who.gid))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env() -> BTreeMap<String, String> {
        [("PATH".to_string(), std::env::var("PATH").unwrap_or_default())].into()
    }

    fn sh(cmd: &str, timeout: Duration) -> Execution {
        run_process("sh", &["-c".into(), cmd.into()], Path::new("/"), &env(), timeout).unwrap()
    }

    #[test]
    fn streams_and_exit_code() {
        let e = sh("printf A; printf B 1>&2; exit 7", Duration::from_secs(10));
        assert_eq!(e.stdout, b"A");
        assert_eq!(e.stderr, b"B");
        assert_eq!(e.exit_code, 7);
        assert!(!e.timed_out);
    }

    #[test]
    fn timeout_kills_group_including_children() {
        let started = Instant::now();
        let e = sh("sleep 30 & sleep 30; echo never", Duration::from_millis(300));
        assert!(e.timed_out);
        assert_eq!(e.exit_code, -1);
        assert!(started.elapsed() < Duration::from_secs(5));
        assert!(e.stdout.is_empty());
    }

    #[test]
    fn environment_is_exactly_what_was_given() {
        let e = sh("env", Duration::from_secs(10));
        let text = String::from_utf8(e.stdout).unwrap();
        assert!(text.lines().all(|l| l.starts_with("PATH=") || l.starts_with("PWD=") || l.starts_with("SHLVL=") || l.starts_with("_=")), "{text}");
    }

    #[test]
    fn oversized_output_truncated() {
        let e = sh("head -c 1100000 /dev/zero", Duration::from_secs(10));
        assert_eq!(e.stdout.len(), OUTPUT_LIMIT_BYTES);
        assert!(e.stdout_truncated);
        assert_eq!(e.exit_code, 0);
    }
}
