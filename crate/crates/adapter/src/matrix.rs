use std::io::Write;
use std::sync::Arc;

use tokio::sync::Semaphore;

use crate::error::AdapterError;
use crate::inputs::StepInputs;
use crate::report::Report;
use crate::step::{client_for, run_site, write_reports, Outcome, SiteRun};

#[derive(Debug, Clone)]
pub struct MatrixOutput {
    pub exit_code: i32,
    /// In matrix order.
    pub sites: Vec<SiteRun>,
    pub report: Report,
}

/// Runs the same work on every site, at most `fan_out` at a time. One
/// site's failure never stops the others. Each site's files go to
/// `artifact_dir/<label>`; `report.json` and `comparison.csv` go to
/// `artifact_dir`. After all sites finish, each site's stdout is relayed to
/// `out` and its stderr to `err` under a `==> label` header, then the summary
/// table goes to `out` and one reason line per site to `err`.
///
/// Exit code: 0 iff every site completed, else the largest per-site code.
pub async fn run_matrix(inputs: &StepInputs, out: &mut dyn Write, err: &mut dyn Write) -> MatrixOutput {
    let client = match inputs.validate().map_err(|e| e.to_string()).and_then(|()| client_for(inputs).map_err(|e| e.to_string())) {
        Ok(c) => Arc::new(c),
        Err(msg) => {
            let _ = writeln!(err, "ci-run: outcome=invalid_input state=- exit_code=- run_id=- label=- detail={msg:?}");
            return MatrixOutput {
                exit_code: Outcome::InvalidInput.exit_code(),
                sites: Vec::new(),
                report: Report { sites: Vec::new() },
            };
        }
    };
    let inputs = Arc::new(inputs.clone());
    let gate = Arc::new(Semaphore::new(inputs.fan_out));
    let mut tasks = tokio::task::JoinSet::new();
    for (i, site) in inputs.sites.iter().cloned().enumerate() {
        let (client, inputs, gate) = (client.clone(), inputs.clone(), gate.clone());
        tasks.spawn(async move {
            let _permit = gate.acquire_owned().await.expect("semaphore stays open");
            let dir = inputs.artifact_dir.join(&site.label);
            (i, run_site(&client, &inputs, &site, &dir).await)
        });
    }
    let mut slots: Vec<Option<SiteRun>> = vec![None; inputs.sites.len()];
    while let Some(joined) = tasks.join_next().await {
        let (i, site) = joined.expect("site task panicked");
        slots[i] = Some(site);
    }
    let mut sites: Vec<SiteRun> = slots.into_iter().map(|s| s.expect("every site reports")).collect();

    for site in &sites {
        let _ = writeln!(err, "==> {}", site.label);
        let _ = out.write_all(site.stdout.as_bytes());
        let _ = err.write_all(site.stderr.as_bytes());
        if !site.stderr.is_empty() && !site.stderr.ends_with('\n') {
            let _ = err.write_all(b"\n");
        }
    }
    let report = Report {
        sites: sites.iter().map(SiteRun::report).collect(),
    };
    if let Err(e) = write_reports(&inputs.artifact_dir, &report) {
        mark_local_error(&mut sites, &e);
    }
    let _ = out.write_all(report.table().as_bytes());
    let _ = out.flush();
    for site in &sites {
        let _ = writeln!(err, "{}", site.reason_line());
    }
    let _ = err.flush();
    MatrixOutput {
        exit_code: sites.iter().map(|s| s.outcome.exit_code()).max().unwrap_or(1),
        sites,
        report,
    }
}

fn mark_local_error(sites: &mut [SiteRun], e: &AdapterError) {
    for site in sites.iter_mut().filter(|s| s.outcome == Outcome::Completed) {
        site.outcome = Outcome::LocalError;
        site.detail = Some(e.to_string());
    }
}
