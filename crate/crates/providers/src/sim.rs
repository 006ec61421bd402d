//! A small batch scheduler simulator.
//!
//! Jobs become eligible `queue_delay` (plus optional seeded jitter) after
//! submission and start strictly in submission order while fewer than
//! `max_concurrent` jobs run. A running job ends when its script's
//! `#SIM runtime=<s>` elapses (done) or its `#SIM walltime=<s>` is exceeded
//! (failed), whichever is first; without either it runs until cancelled.
//!
//! Time is integer milliseconds. In virtual mode only [`SimScheduler::tick`]
//! moves time; in wall-clock mode every call first catches up to the Unix clock.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use parking_lot::Mutex;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::batch::{PilotState, Scheduler};
use crate::error::{ProviderError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeMode {
    Virtual,
    WallClock,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub queue_delay_ms: i64,
    pub max_concurrent: usize,
    /// Applied when a script has no walltime directive.
    #[serde(default)]
    pub default_walltime_ms: Option<i64>,
    #[serde(default)]
    pub jitter_ms: i64,
    #[serde(default)]
    pub seed: u64,
    pub time_mode: TimeMode,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            queue_delay_ms: 0,
            max_concurrent: 4,
            default_walltime_ms: None,
            jitter_ms: 0,
            seed: 0,
            time_mode: TimeMode::Virtual,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimEventKind {
    Submitted,
    Started,
    Completed,
    WalltimeExceeded,
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimEvent {
    pub at_ms: i64,
    pub job_id: String,
    pub kind: SimEventKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmissionRecord {
    pub at_ms: i64,
    pub script: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimJob {
    pub job_id: String,
    pub script: String,
    pub state: PilotState,
    pub submitted_at_ms: i64,
    pub eligible_at_ms: i64,
    pub started_at_ms: Option<i64>,
    pub finished_at_ms: Option<i64>,
    pub runtime_ms: Option<i64>,
    pub walltime_ms: Option<i64>,
}

impl SimJob {
    /// When and how a running job ends by itself.
    fn natural_end(&self) -> Option<(i64, SimEventKind)> {
        let start = self.started_at_ms?;
        match (self.runtime_ms, self.walltime_ms) {
            (Some(r), Some(w)) if w < r => Some((start + w, SimEventKind::WalltimeExceeded)),
            (Some(r), _) => Some((start + r, SimEventKind::Completed)),
            (None, Some(w)) => Some((start + w, SimEventKind::WalltimeExceeded)),
            (None, None) => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimState {
    pub now_ms: i64,
    pub submitted: u64,
    pub jobs: Vec<SimJob>,
    pub submission_log: Vec<SubmissionRecord>,
    pub trace: Vec<SimEvent>,
}

/// `#SIM key=value` directives found in a script.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Directives {
    pub walltime_ms: Option<i64>,
    pub runtime_ms: Option<i64>,
}

impl Directives {
    pub fn parse(script: &str) -> Result<Self> {
        let mut d = Directives::default();
        for line in script.lines() {
            let Some(rest) = line.trim().strip_prefix("#SIM") else {
                continue;
            };
            for pair in rest.split_whitespace() {
                let Some((key, value)) = pair.split_once('=') else {
                    continue;
                };
                let slot = match key {
                    "walltime" => &mut d.walltime_ms,
                    "runtime" => &mut d.runtime_ms,
                    _ => continue,
                };
                let secs: f64 = value.parse().map_err(|_| {
                    ProviderError::SubmitFailure(format!("bad #SIM {key} value `{value}`"))
                })?;
                if !secs.is_finite() || secs < 0.0 {
                    return Err(ProviderError::SubmitFailure(format!("bad #SIM {key} value `{value}`")));
                }
                *slot = Some((secs * 1000.0).round() as i64);
            }
        }
        Ok(d)
    }
}

pub fn unix_millis() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

fn jitter(config: &SimConfig, number: u64) -> i64 {
    if config.jitter_ms <= 0 {
        return 0;
    }
    let mut rng = StdRng::seed_from_u64(config.seed ^ number.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.random_range(0..=config.jitter_ms)
}

impl SimState {
    fn job_mut(&mut self, job_id: &str) -> Result<&mut SimJob> {
        self.jobs
            .iter_mut()
            .find(|j| j.job_id == job_id)
            .ok_or_else(|| ProviderError::UnknownJob(job_id.to_string()))
    }

    fn record(&mut self, at_ms: i64, job_id: &str, kind: SimEventKind) {
        self.trace.push(SimEvent {
            at_ms,
            job_id: job_id.to_string(),
            kind,
        });
    }

    fn submit(&mut self, config: &SimConfig, script: &str, directives: Directives) -> String {
        self.submitted += 1;
        let number = self.submitted;
        let job_id = format!("sim-{number}");
        let now = self.now_ms;
        self.jobs.push(SimJob {
            job_id: job_id.clone(),
            script: script.to_string(),
            state: PilotState::Pending,
            submitted_at_ms: now,
            eligible_at_ms: now + config.queue_delay_ms.max(0) + jitter(config, number),
            started_at_ms: None,
            finished_at_ms: None,
            runtime_ms: directives.runtime_ms,
            walltime_ms: directives.walltime_ms.or(config.default_walltime_ms),
        });
        self.submission_log.push(SubmissionRecord {
            at_ms: now,
            script: script.to_string(),
        });
        self.record(now, &job_id, SimEventKind::Submitted);
        job_id
    }

    /// Processes every start and end up to `target`, in time order.
    fn advance(&mut self, config: &SimConfig, target: i64) {
        loop {
            let running = self.jobs.iter().filter(|j| j.state == PilotState::Running).count();
            let next_end = self
                .jobs
                .iter()
                .enumerate()
                .filter(|(_, j)| j.state == PilotState::Running)
                .filter_map(|(i, j)| j.natural_end().map(|(t, k)| (t, i, k)))
                .min_by_key(|(t, i, _)| (*t, *i));
            // strict FIFO: only the oldest pending job may start
            let next_start = if running < config.max_concurrent {
                self.jobs
                    .iter()
                    .position(|j| j.state == PilotState::Pending)
                    .map(|i| (self.jobs[i].eligible_at_ms.max(self.now_ms), i))
            } else {
                None
            };
            let end_first = match (next_end, next_start) {
                (Some((te, _, _)), Some((ts, _))) => te <= ts,
                (Some(_), None) => true,
                _ => false,
            };
            if end_first {
                let (t, i, kind) = next_end.unwrap();
                if t > target {
                    break;
                }
                self.now_ms = self.now_ms.max(t);
                let job = &mut self.jobs[i];
                job.state = if kind == SimEventKind::Completed {
                    PilotState::Done
                } else {
                    PilotState::Failed
                };
                job.finished_at_ms = Some(t);
                let id = job.job_id.clone();
                self.record(t, &id, kind);
            } else if let Some((t, i)) = next_start {
                if t > target {
                    break;
                }
                self.now_ms = self.now_ms.max(t);
                let job = &mut self.jobs[i];
                job.state = PilotState::Running;
                job.started_at_ms = Some(t);
                let id = job.job_id.clone();
                self.record(t, &id, SimEventKind::Started);
            } else {
                break;
            }
        }
        self.now_ms = self.now_ms.max(target);
    }

    fn cancel(&mut self, job_id: &str) -> Result<()> {
        let now = self.now_ms;
        let job = self.job_mut(job_id)?;
        let state = match job.state {
            PilotState::Pending => PilotState::Failed,
            PilotState::Running => PilotState::Done,
            _ => return Ok(()),
        };
        job.state = state;
        job.finished_at_ms = Some(now);
        self.record(now, job_id, SimEventKind::Cancelled);
        Ok(())
    }
}

/// In-process simulator. All state changes go through one mutex.
#[derive(Debug)]
pub struct SimScheduler {
    config: SimConfig,
    state: Mutex<SimState>,
}

impl SimScheduler {
    pub fn new(config: SimConfig) -> Self {
        let now_ms = match config.time_mode {
            TimeMode::Virtual => 0,
            TimeMode::WallClock => unix_millis(),
        };
        SimScheduler {
            config,
            state: Mutex::new(SimState {
                now_ms,
                ..SimState::default()
            }),
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    fn catch_up(&self, state: &mut SimState) {
        if self.config.time_mode == TimeMode::WallClock {
            state.advance(&self.config, unix_millis());
        }
    }

    /// Submits script text directly; `label` is what the submission log records.
    pub fn submit_text(&self, label: &str, script: &str) -> Result<String> {
        let directives = Directives::parse(script)?;
        let mut state = self.state.lock();
        self.catch_up(&mut state);
        let id = state.submit(&self.config, label, directives);
        // a zero-delay job may start immediately
        let now = state.now_ms;
        state.advance(&self.config, now);
        Ok(id)
    }

    /// Advances virtual time to `now_ms` and returns the events that produced.
    pub fn tick(&self, now_ms: i64) -> Vec<SimEvent> {
        let mut state = self.state.lock();
        let before = state.trace.len();
        state.advance(&self.config, now_ms);
        state.trace[before..].to_vec()
    }

    pub fn now_ms(&self) -> i64 {
        self.state.lock().now_ms
    }

    pub fn job(&self, job_id: &str) -> Result<SimJob> {
        let mut state = self.state.lock();
        self.catch_up(&mut state);
        state.job_mut(job_id).cloned()
    }

    pub fn submission_log(&self) -> Vec<SubmissionRecord> {
        self.state.lock().submission_log.clone()
    }

    pub fn trace(&self) -> Vec<SimEvent> {
        self.state.lock().trace.clone()
    }

    pub fn snapshot(&self) -> SimState {
        self.state.lock().clone()
    }
}

impl Scheduler for SimScheduler {
    fn submit(&self, script: &str) -> Result<String> {
        let text = std::fs::read_to_string(script)
            .map_err(|e| ProviderError::SubmitFailure(format!("{script}: {e}")))?;
        self.submit_text(script, &text)
    }

    fn status(&self, job_id: &str) -> Result<PilotState> {
        Ok(self.job(job_id)?.state)
    }

    fn cancel(&self, job_id: &str) -> Result<()> {
        let mut state = self.state.lock();
        self.catch_up(&mut state);
        state.cancel(job_id)?;
        let now = state.now_ms;
        state.advance(&self.config, now);
        Ok(())
    }
}

/// File-backed simulator state for the `sim-sched` command line. Every
/// operation holds an exclusive lock on `<dir>/lock` for its duration.
#[derive(Debug)]
pub struct SimStore {
    dir: PathBuf,
    _lock: File,
    config: SimConfig,
    state: SimState,
}

impl SimStore {
    const CONFIG: &'static str = "config.json";
    const STATE: &'static str = "state.json";

    /// Writes a fresh configuration, discarding any previous state.
    pub fn init(dir: &Path, config: SimConfig) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let store = SimStore::lock(dir, Some(config))?;
        let now_ms = match store.config.time_mode {
            TimeMode::Virtual => 0,
            TimeMode::WallClock => unix_millis(),
        };
        let mut store = store;
        store.state = SimState {
            now_ms,
            ..SimState::default()
        };
        store.save()
    }

    /// Opens an existing store (or a default wall-clock one) under lock.
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut store = SimStore::lock(dir, None)?;
        if store.config.time_mode == TimeMode::WallClock {
            store.state.advance(&store.config, unix_millis());
        }
        Ok(store)
    }

    fn lock(dir: &Path, config: Option<SimConfig>) -> Result<Self> {
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(dir.join("lock"))?;
        lock.lock()?;
        let config = match config {
            Some(c) => {
                write_json(&dir.join(Self::CONFIG), &c)?;
                c
            }
            None => read_json(&dir.join(Self::CONFIG))?.unwrap_or(SimConfig {
                time_mode: TimeMode::WallClock,
                ..SimConfig::default()
            }),
        };
        let state = read_json(&dir.join(Self::STATE))?.unwrap_or_else(|| SimState {
            now_ms: match config.time_mode {
                TimeMode::Virtual => 0,
                TimeMode::WallClock => unix_millis(),
            },
            ..SimState::default()
        });
        Ok(SimStore {
            dir: dir.to_path_buf(),
            _lock: lock,
            config,
            state,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn submit(&mut self, script_path: &str) -> Result<String> {
        let text = std::fs::read_to_string(script_path)
            .map_err(|e| ProviderError::SubmitFailure(format!("{script_path}: {e}")))?;
        let directives = Directives::parse(&text)?;
        let id = self.state.submit(&self.config, script_path, directives);
        let now = self.state.now_ms;
        self.state.advance(&self.config, now);
        self.save()?;
        Ok(id)
    }

    pub fn status(&mut self, job_id: &str) -> Result<PilotState> {
        let state = self.state.job_mut(job_id)?.state;
        self.save()?;
        Ok(state)
    }

    pub fn cancel(&mut self, job_id: &str) -> Result<()> {
        self.state.cancel(job_id)?;
        let now = self.state.now_ms;
        self.state.advance(&self.config, now);
        self.save()
    }

    pub fn tick(&mut self, now_ms: i64) -> Result<Vec<SimEvent>> {
        let before = self.state.trace.len();
        self.state.advance(&self.config, now_ms);
        self.save()?;
        Ok(self.state.trace[before..].to_vec())
    }

    fn save(&self) -> Result<()> {
        write_json(&self.dir.join(Self::STATE), &self.state)
    }
}

/// Status word printed by `sim-sched status`, in the scheduler-CLI style the
/// batch provider parses.
pub fn status_word(state: PilotState) -> &'static str {
    match state {
        PilotState::Pending => "PENDING",
        PilotState::Running => "RUNNING",
        PilotState::Done => "COMPLETED",
        PilotState::Failed => "FAILED",
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    match std::fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| ProviderError::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}: {e}", path.display())))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(value).expect("serializable"))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
