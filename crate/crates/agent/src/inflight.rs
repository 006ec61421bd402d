use std::os::unix::fs::DirBuilderExt;
use std::path::{Path, PathBuf};

use ci_protocol::api::ResultReport;
use ci_protocol::RunId;
use serde::{Deserialize, Serialize};

/// Durable record of a claimed run the broker has not yet accepted a result for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InflightRecord {
    pub run_id: RunId,
    /// Set once the run finished locally; resent verbatim after a restart.
    pub report: Option<ResultReport>,
}

/// One JSON file per run under `<state_dir>/inflight`. Writes go through a
/// temporary file and a rename, so a crash leaves either version intact.
#[derive(Debug, Clone)]
pub struct InflightStore {
    dir: PathBuf,
}

impl InflightStore {
    pub fn open(state_dir: &Path) -> std::io::Result<Self> {
        let dir = state_dir.join("inflight");
        std::fs::DirBuilder::new().recursive(true).mode(0o700).create(&dir)?;
        Ok(InflightStore { dir })
    }

    fn path(&self, run_id: &RunId) -> PathBuf {
        self.dir.join(format!("{run_id}.json"))
    }

    fn write(&self, record: &InflightRecord) -> std::io::Result<()> {
        let tmp = self.dir.join(format!(".{}.tmp", record.run_id));
        let bytes = serde_json::to_vec(record).map_err(std::io::Error::other)?;
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, self.path(&record.run_id))
    }

    /// Called before a claimed run is handed to any worker.
    pub fn begin(&self, run_id: RunId) -> std::io::Result<()> {
        self.write(&InflightRecord { run_id, report: None })
    }

    pub fn finish(&self, run_id: RunId, report: &ResultReport) -> std::io::Result<()> {
        self.write(&InflightRecord {
            run_id,
            report: Some(report.clone()),
        })
    }

    /// The broker has the result; forget the run.
    pub fn clear(&self, run_id: &RunId) -> std::io::Result<()> {
        match std::fs::remove_file(self.path(run_id)) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e),
            _ => Ok(()),
        }
    }

    /// Every record left behind, oldest file first. Unreadable files are skipped.
    pub fn pending(&self) -> std::io::Result<Vec<InflightRecord>> {
        let mut found = Vec::new();
        for entry in std::fs::read_dir(&self.dir)? {
            let path = entry?.path();
            if path.extension().is_none_or(|e| e != "json") {
                continue;
            }
            let modified = std::fs::metadata(&path).and_then(|m| m.modified()).ok();
            match std::fs::read(&path).map(|b| serde_json::from_slice::<InflightRecord>(&b)) {
                Ok(Ok(record)) => found.push((modified, record)),
                _ => tracing::warn!(path = %path.display(), "skipping unreadable in-flight record"),
            }
        }
        found.sort_by_key(|(m, _)| *m);
        Ok(found.into_iter().map(|(_, r)| r).collect())
    }
}
