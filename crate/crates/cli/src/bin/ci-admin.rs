use std::collections::BTreeSet;
use std::io::Write;
use std::os::unix::fs::OpenOptionsExt;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use ci_adapter::{publish_artifacts, Fetched};
use ci_client::{AuditQuery, ClientError, RunQuery, UserClient};
use ci_protocol::api::{EndpointDescriptor, RegisterFunctionRequest};
use ci_protocol::{encode_string, ArtifactId, AuditAction, EndpointId, EndpointMode, FunctionId, PayloadKind, RunId, RunState};
use clap::{Parser, Subcommand, ValueEnum};

/// Administrative and reviewer commands against the broker API. Prints JSON.
#[derive(Parser)]
#[command(name = "ci-admin", version)]
struct Cli {
    #[arg(long, env = "CI_BROKER_URL")]
    broker: String,
    #[command(flatten)]
    credentials: ci_cli::CredentialArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    SingleUser,
    MultiUser,
}

#[derive(Subcommand)]
enum Command {
    /// Check the credentials by obtaining a token.
    Login,
    /// Register an endpoint. Prints the endpoint id; the agent key goes to --key-file.
    RegisterEndpoint {
        #[arg(long)]
        name: String,
        #[arg(long, value_enum, default_value = "multi-user")]
        mode: Mode,
        /// Runs need approval by --reviewer before they execute.
        #[arg(long, requires = "reviewer")]
        protected: bool,
        #[arg(long)]
        reviewer: Option<String>,
        /// Allowed function id; repeatable. Empty means any.
        #[arg(long = "allow")]
        allow_list: Vec<FunctionId>,
        /// Written with mode 0600; must not exist.
        #[arg(long)]
        key_file: PathBuf,
    },
    /// Register a shell-script function from a file. Prints its id.
    RegisterFunction { payload_file: PathBuf },
    Endpoints,
    Endpoint { id: EndpointId },
    Function { id: FunctionId },
    Runs {
        #[arg(long)]
        endpoint: Option<EndpointId>,
        #[arg(long)]
        state: Option<RunState>,
    },
    Status { run_id: RunId },
    Result { run_id: RunId },
    Approve { run_id: RunId },
    Reject { run_id: RunId },
    Audit {
        #[arg(long)]
        subject: Option<String>,
        #[arg(long)]
        action: Option<String>,
        #[arg(long)]
        from_seq: Option<u64>,
        #[arg(long)]
        to_seq: Option<u64>,
    },
    /// Download and verify an artifact bundle into --out.
    Artifact {
        id: ArtifactId,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
    match rt.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ci-admin: {e:#}");
            let code = match e.downcast_ref::<ClientError>() {
                Some(c) if c.is_auth() => 2,
                Some(ClientError::Unreachable(_)) => 3,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

async fn run(cli: Cli) -> anyhow::Result<()> {
    let creds = cli.credentials.resolve()?;
    let client = UserClient::new(&cli.broker, &creds.client_id, creds.client_secret.expose())?;
    match cli.command {
        Command::Login => {
            let token = client.login().await?;
            println!("token valid until {}", token.expires_at);
        }
        Command::RegisterEndpoint {
            name,
            mode,
            protected,
            reviewer,
            allow_list,
            key_file,
        } => {
            let mut key_out = std::fs::OpenOptions::new()
                .write(true)
                .create_new(true)
                .mode(0o600)
                .open(&key_file)
                .with_context(|| key_file.display().to_string())?;
            let descriptor = EndpointDescriptor {
                display_name: name,
                mode: match mode {
                    Mode::SingleUser => EndpointMode::SingleUser,
                    Mode::MultiUser => EndpointMode::MultiUser,
                },
                protected,
                reviewer,
                allow_list: allow_list.into_iter().collect::<BTreeSet<_>>(),
                template: None,
            };
            let reg = client.register_endpoint(&descriptor).await?;
            writeln!(key_out, "{}", reg.agent_key)?;
            println!("{}", reg.endpoint_id);
        }
        Command::RegisterFunction { payload_file } => {
            let payload = std::fs::read_to_string(&payload_file).with_context(|| payload_file.display().to_string())?;
            let req = RegisterFunctionRequest {
                payload_kind: PayloadKind::ShellScript,
                payload,
            };
            println!("{}", client.register_function(&req).await?.function_id);
        }
        Command::Endpoints => println!("{}", encode_string(&client.list_endpoints().await?)),
        Command::Endpoint { id } => println!("{}", encode_string(&client.get_endpoint(&id).await?)),
        Command::Function { id } => println!("{}", encode_string(&client.get_function(&id).await?)),
        Command::Runs { endpoint, state } => {
            let query = RunQuery {
                endpoint_id: endpoint,
                state,
            };
            println!("{}", encode_string(&client.list_runs(&query).await?));
        }
        Command::Status { run_id } => println!("{}", encode_string(&client.get_status(&run_id).await?)),
        Command::Result { run_id } => println!("{}", encode_string(&client.get_result(&run_id).await?)),
        Command::Approve { run_id } => println!("{}", encode_string(&client.approve(&run_id).await?)),
        Command::Reject { run_id } => println!("{}", encode_string(&client.reject(&run_id).await?)),
        Command::Audit {
            subject,
            action,
            from_seq,
            to_seq,
        } => {
            let action = action
                .map(|a| serde_json::from_value::<AuditAction>(serde_json::Value::String(a.clone())).with_context(|| format!("unknown action `{a}`")))
                .transpose()?;
            let query = AuditQuery {
                subject,
                action,
                from_seq,
                to_seq,
            };
            for event in client.query_audit(&query).await? {
                println!("{}", encode_string(&event));
            }
        }
        Command::Artifact { id, out } => {
            let fetched = match client.get_artifact(&id).await {
                Ok(content) => Fetched::Content(content),
                Err(ClientError::Api { code, bundle: Some(b), .. }) if code == "artifact_purged" => Fetched::Purged(b),
                Err(e) => return Err(e.into()),
            };
            println!("{}", publish_artifacts(&out, &fetched)?.display());
        }
    }
    Ok(())
}
