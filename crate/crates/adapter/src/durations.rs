use std::collections::BTreeMap;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// Wall time of one test case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestTiming {
    pub name: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestOutcome {
    Passed,
    Failed,
    Skipped,
}

// pytest --durations: "0.42s call     tests/test_x.py::test_dock_smiles"
static PYTEST: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*(\d+(?:\.\d+)?)s\s+(setup|call|teardown)\s+(\S+)\s*$").unwrap());
// go test -v: "--- PASS: TestParse (0.12s)"
static GO: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*--- (PASS|FAIL|SKIP): (\S+) \((\d+(?:\.\d+)?)s\)").unwrap());
// cargo nextest: "        PASS [   0.004s] my-crate tests::parses"
static NEXTEST: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*(PASS|FAIL|SLOW|SIGSEGV|TIMEOUT) \[\s*(\d+(?:\.\d+)?)s\]\s+(.+?)\s*$").unwrap());
// pytest -v: "tests/test_x.py::test_a PASSED     [ 20%]"
static PYTEST_VERBOSE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(\S+::\S+) (PASSED|FAILED|ERROR|SKIPPED|XFAIL|XPASS)\b").unwrap());
// pytest -r summary: "FAILED tests/test_x.py::test_b - assert ..."
static PYTEST_SUMMARY: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(PASSED|FAILED|ERROR|SKIPPED|XFAIL|XPASS) (\S+::\S+)").unwrap());

/// Per-test durations from pytest `--durations`, `go test -v` or cargo
/// nextest output. pytest setup, call and teardown phases are summed per
/// test. Lines in no known format are skipped; the result is sorted by name.
pub fn parse_test_durations(text: &str) -> Vec<TestTiming> {
    let mut totals: BTreeMap<String, f64> = BTreeMap::new();
    for line in text.lines() {
        let (name, secs) = if let Some(c) = PYTEST.captures(line) {
            (c[3].to_string(), c[1].to_string())
        } else if let Some(c) = GO.captures(line) {
            (c[2].to_string(), c[3].to_string())
        } else if let Some(c) = NEXTEST.captures(line) {
            if &c[1] == "SLOW" {
                continue;
            }
            (c[3].to_string(), c[2].to_string())
        } else {
            continue;
        };
        let Ok(seconds) = secs.parse::<f64>() else { continue };
        *totals.entry(name).or_default() += seconds;
    }
    totals
        .into_iter()
        .map(|(name, seconds)| TestTiming { name, seconds })
        .collect()
}

fn outcome_word(word: &str) -> Option<TestOutcome> {
    match word {
        "PASSED" | "PASS" | "XFAIL" => Some(TestOutcome::Passed),
        "FAILED" | "FAIL" | "ERROR" | "XPASS" | "SIGSEGV" | "TIMEOUT" => Some(TestOutcome::Failed),
        "SKIPPED" | "SKIP" => Some(TestOutcome::Skipped),
        _ => None,
    }
}

/// Pass/fail per test from the same formats (pytest needs `-v` or `-rA`).
/// A failure reported anywhere wins over a pass for the same test.
pub fn parse_test_outcomes(text: &str) -> BTreeMap<String, TestOutcome> {
    let mut outcomes = BTreeMap::new();
    for line in text.lines() {
        let found = if let Some(c) = PYTEST_VERBOSE.captures(line) {
            outcome_word(&c[2]).map(|o| (c[1].to_string(), o))
        } else if let Some(c) = PYTEST_SUMMARY.captures(line) {
            outcome_word(&c[1]).map(|o| (c[2].to_string(), o))
        } else if let Some(c) = GO.captures(line) {
            outcome_word(&c[1]).map(|o| (c[2].to_string(), o))
        } else if let Some(c) = NEXTEST.captures(line) {
            outcome_word(&c[1]).map(|o| (c[3].to_string(), o))
        } else {
            None
        };
        if let Some((name, outcome)) = found {
            let slot = outcomes.entry(name).or_insert(outcome);
            if outcome == TestOutcome::Failed {
                *slot = outcome;
            }
        }
    }
    outcomes
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_example_line() {
        assert_eq!(
            parse_test_durations("0.42s call test_dock_smiles"),
            [TestTiming { name: "test_dock_smiles".into(), seconds: 0.42 }]
        );
    }

    #[test]
    fn empty_and_garbage() {
        assert!(parse_test_durations("").is_empty());
        assert!(parse_test_durations("lorem ipsum\n0.3 seconds\n---\n\u{0}\u{ff}").is_empty());
        assert!(parse_test_outcomes("nothing here").is_empty());
    }

    #[test]
    fn go_and_nextest_lines() {
        let text = "=== RUN   TestParse\n--- PASS: TestParse (0.12s)\n--- FAIL: TestDock/smiles (1.50s)\n    \
                    PASS [   0.004s] ci-protocol codec::round_trip\n        SLOW [> 60.000s] x y\n\
                    FAIL [   2.100s] ci-broker tests::retention\n";
        let d = parse_test_durations(text);
        let names: Vec<_> = d.iter().map(|t| (t.name.as_str(), t.seconds)).collect();
        assert_eq!(
            names,
            [
                ("TestDock/smiles", 1.5),
                ("TestParse", 0.12),
                ("ci-broker tests::retention", 2.1),
                ("ci-protocol codec::round_trip", 0.004),
            ]
        );
        let o = parse_test_outcomes(text);
        assert_eq!(o["TestParse"], TestOutcome::Passed);
        assert_eq!(o["TestDock/smiles"], TestOutcome::Failed);
        assert_eq!(o["ci-broker tests::retention"], TestOutcome::Failed);
    }
}
