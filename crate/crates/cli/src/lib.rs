//! Helpers shared by the command-line programs.

use std::path::PathBuf;

use ci_adapter::Credentials;

/// Logs to stderr, filtered by `RUST_LOG` (default `info`).
pub fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).try_init();
}

/// Client credentials for user-facing commands: id from the flag or
/// `CI_CLIENT_ID`, secret from `CI_CLIENT_SECRET` or a file. Never from argv.
#[derive(Debug, Clone, clap::Args)]
pub struct CredentialArgs {
    /// Client id (default: $CI_CLIENT_ID).
    #[arg(long)]
    pub client_id: Option<String>,
    /// File whose first line is the client secret (default: $CI_CLIENT_SECRET).
    #[arg(long)]
    pub client_secret_file: Option<PathBuf>,
}

impl CredentialArgs {
    pub fn resolve(&self) -> ci_adapter::Result<Credentials> {
        Credentials::resolve(self.client_id.clone(), self.client_secret_file.as_deref(), |k| std::env::var(k).ok())
    }
}

/// Resolves on SIGINT or SIGTERM.
pub async fn shutdown_signal() {
    use tokio::signal::unix::{signal, SignalKind};
    let mut term = signal(SignalKind::terminate()).expect("install SIGTERM handler");
    tokio::select! {
        _ = tokio::signal::ctrl_c() => {}
        _ = term.recv() => {}
    }
}
