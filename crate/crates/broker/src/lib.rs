//! The coordination broker: authentication, endpoint and function registries,
//! the approval-gated task queue, result and artifact collection, and the
//! append-only audit journal that doubles as its recovery log.
//!
//! State directory layout:
//!
//! ```text
//! <state_dir>/audit.jsonl            one AuditEvent per line
//! <state_dir>/snapshot.json          periodic fold of the journal
//! <state_dir>/artifacts/<id>/<file>  retained artifact content
//! ```

pub mod broker;
pub mod clock;
pub mod error;
pub mod http;
pub mod journal;
pub mod secrets;
pub mod state;

use std::future::Future;
use std::sync::Arc;
use std::time::Duration;

pub use broker::{AuditFilter, Broker, BrokerConfig, RunFilter};
pub use clock::{Clock, ManualClock, SystemClock};
pub use error::BrokerError;

/// Serves the HTTP API until `shutdown` resolves, running retention sweeps,
/// approval expiry and token pruning every `sweep_interval` in the background.
/// A final snapshot is written on the way out.
pub async fn serve(
    broker: Arc<Broker>,
    listener: tokio::net::TcpListener,
    sweep_interval: Duration,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let sweeper = tokio::spawn(maintenance_loop(broker.clone(), sweep_interval));
    let app = http::router(broker.clone());
    let result = axum::serve(listener, app)
        .with_graceful_shutdown(shutdown)
        .await;
    sweeper.abort();
    if let Err(err) = broker.snapshot() {
        tracing::error!(%err, "final snapshot failed");
    }
    result
}

async fn maintenance_loop(broker: Arc<Broker>, every: Duration) {
    let mut tick = tokio::time::interval(every);
    tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        tick.tick().await;
        let b = broker.clone();
        let outcome = tokio::task::spawn_blocking(move || {
            let purged = b.sweep_retention(b.now())?;
            let expired = b.expire_approvals()?;
            b.prune_tokens();
            Ok::<_, BrokerError>((purged, expired))
        })
        .await;
        match outcome {
            Ok(Ok((purged, expired))) if purged + expired > 0 => {
                tracing::info!(purged, expired, "maintenance pass");
            }
            Ok(Ok(_)) => {}
            Ok(Err(err)) => tracing::error!(%err, "maintenance pass failed"),
            Err(err) => tracing::error!(%err, "maintenance task panicked"),
        }
    }
}
