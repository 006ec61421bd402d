use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ci_protocol::{RunId, RunState};
use serde::{Deserialize, Serialize};

use crate::durations::{parse_test_durations, parse_test_outcomes, TestOutcome};
use crate::error::{AdapterError, Result};

pub const REPORT_FILE: &str = "report.json";
pub const COMPARISON_FILE: &str = "comparison.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestEntry {
    pub name: String,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<TestOutcome>,
}

/// One endpoint's row in the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteReport {
    pub label: String,
    pub run_id: Option<RunId>,
    pub state: Option<RunState>,
    pub exit_code: Option<i32>,
    pub duration_seconds: f64,
    /// Sorted by name.
    pub tests: Vec<TestEntry>,
    /// The machine-readable outcome, e.g. `completed` or `approval_timeout`.
    pub outcome: String,
}

impl SiteReport {
    pub fn passed(&self) -> BTreeSet<&str> {
        self.with_outcome(TestOutcome::Passed)
    }

    pub fn failed(&self) -> BTreeSet<&str> {
        self.with_outcome(TestOutcome::Failed)
    }

    fn with_outcome(&self, want: TestOutcome) -> BTreeSet<&str> {
        self.tests
            .iter()
            .filter(|t| t.outcome == Some(want))
            .map(|t| t.name.as_str())
            .collect()
    }
}

/// Durations from the test runner's report, with pass/fail where the
/// output shows it. Tests that have an outcome but no timing get 0 s.
pub fn test_entries(stdout: &str) -> Vec<TestEntry> {
    let mut outcomes = parse_test_outcomes(stdout);
    let mut entries: Vec<TestEntry> = parse_test_durations(stdout)
        .into_iter()
        .map(|t| TestEntry {
            outcome: outcomes.remove(&t.name),
            name: t.name,
            seconds: t.seconds,
        })
        .collect();
    entries.extend(outcomes.into_iter().map(|(name, o)| TestEntry {
        name,
        seconds: 0.0,
        outcome: Some(o),
    }));
    entries.sort_by(|a, b| a.name.cmp(&b.name));
    entries
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub sites: Vec<SiteReport>,
}

impl Report {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text + "\n").map_err(AdapterError::io(path))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(AdapterError::io(path))?;
        serde_json::from_str(&text).map_err(|e| AdapterError::InvalidInput(format!("{}: {e}", path.display())))
    }

    /// One row per test, one seconds column per site; blank where a site
    /// did not report the test.
    pub fn write_comparison_csv(&self, path: &Path) -> Result<()> {
        let mut by_test: BTreeMap<&str, Vec<Option<f64>>> = BTreeMap::new();
        for (i, site) in self.sites.iter().enumerate() {
            for t in &site.tests {
                by_test.entry(&t.name).or_insert_with(|| vec![None; self.sites.len()])[i] = Some(t.seconds);
            }
        }
        let csv_err = |e: csv::Error| AdapterError::InvalidInput(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header = vec!["test".to_string()];
        header.extend(self.sites.iter().map(|s| s.label.clone()));
        w.write_record(&header).map_err(csv_err)?;
        for (name, cells) in by_test {
            let mut row = vec![name.to_string()];
            row.extend(cells.iter().map(|c| c.map(|s| format!("{s}")).unwrap_or_default()));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(AdapterError::io(path))
    }

    /// Fixed-width summary, one line per site.
    pub fn table(&self) -> String {
        let width = self.sites.iter().map(|s| s.label.len()).max().unwrap_or(0).max(5);
        let mut out = format!(
            "{:<width$}  {:<17}  {:>4}  {:>9}  {:>5}  {:>5}  run\n",
            "site", "state", "exit", "seconds", "pass", "fail"
        );
        for s in &self.sites {
            out += &format!(
                "{:<width$}  {:<17}  {:>4}  {:>9.2}  {:>5}  {:>5}  {}\n",
                s.label,
                s.state.map_or_else(|| s.outcome.clone(), |st| st.to_string()),
                s.exit_code.map_or_else(|| "-".into(), |c| c.to_string()),
                s.duration_seconds,
                s.passed().len(),
                s.failed().len(),
                s.run_id.map_or_else(|| "-".into(), |r| r.to_string()),
            );
        }
        out
    }
}
