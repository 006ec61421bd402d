use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use ci_broker::{Broker, BrokerConfig};
use clap::{Parser, Subcommand};

/// The coordination broker.
#[derive(Parser)]
#[command(name = "ci-broker", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the HTTP API.
    Serve {
        /// Directory holding audit.jsonl, snapshot.json and artifacts/.
        #[arg(long)]
        state_dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8470")]
        listen: SocketAddr,
        /// TOML file with BrokerConfig keys and [[credentials]] tables.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seconds between retention, approval-expiry and token sweeps.
        #[arg(long, default_value_t = 60.0)]
        sweep_interval: f64,
    },
    /// Read a secret from stdin and print the hash to put in the config.
    HashSecret,
}

fn main() -> ExitCode {
    ci_cli::init_logging();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ci-broker: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::HashSecret => {
            let mut line = String::new();
            std::io::stdin().lock().read_line(&mut line)?;
            let secret = line.trim_end_matches(['\r', '\n']);
            anyhow::ensure!(!secret.is_empty(), "no secret on stdin");
            println!("{}", ci_broker::secrets::hash_secret(secret));
            Ok(())
        }
        Command::Serve {
            state_dir,
            listen,
            config,
            sweep_interval,
        } => {
            let config = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).with_context(|| path.display().to_string())?;
                    toml::from_str::<BrokerConfig>(&text).with_context(|| path.display().to_string())?
                }
                None => BrokerConfig::default(),
            };
            anyhow::ensure!(sweep_interval > 0.0, "--sweep-interval must be positive");
            let broker = Arc::new(Broker::open(&state_dir, config)?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(listen).await?;
                let addr = listener.local_addr()?;
                // the first stdout line tells scripts where to connect
                println!("listening on {addr}");
                std::io::stdout().flush()?;
                tracing::info!(%addr, state_dir = %state_dir.display(), "broker serving");
                ci_broker::serve(broker, listener, Duration::from_secs_f64(sweep_interval), ci_cli::shutdown_signal()).await?;
                anyhow::Ok(())
            })
        }
    }
}
