use std::path::PathBuf;
use std::process::ExitCode;

use ci_agent::{Agent, AgentConfig, AgentError};
use clap::Parser;

/// Site agent: polls the broker over outbound connections only and runs
/// claimed tasks. `AGENT_KEY` overrides the config's agent_key_file.
#[derive(Parser)]
#[command(name = "ci-agent", version)]
struct Cli {
    /// Agent TOML config.
    #[arg(long)]
    config: PathBuf,
}

fn main() -> ExitCode {
    ci_cli::init_logging();
    let cli = Cli::parse();
    let outcome = AgentConfig::load(&cli.config).and_then(|config| {
        let agent = Agent::new(config)?;
        let stop = agent.stop_handle();
        std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().expect("signal runtime");
            rt.block_on(ci_cli::shutdown_signal());
            tracing::info!("stopping");
            stop.stop();
        });
        agent.run()
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ci-agent: {e}");
            match e {
                AgentError::InvalidAgentKey => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
