use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use ci_adapter::{parse_matrix, run_matrix, run_step, Site, StepInputs, Work};
use ci_protocol::{EndpointId, FunctionId, RepoRef};
use clap::{ArgGroup, Parser};

/// Run a task on one endpoint or a matrix of endpoints from a CI step.
///
/// Exit codes: 0 completed, 1 run failed/rejected/expired/timed out or bad
/// input, 2 authentication failure, 3 broker unreachable. The last stderr
/// line is `ci-run: outcome=<reason> ...`.
#[derive(Parser)]
#[command(name = "ci-run", version)]
#[command(group(ArgGroup::new("target").required(true).args(["endpoint", "matrix"])))]
#[command(group(ArgGroup::new("work").required(true).args(["shell", "function"])))]
struct Cli {
    #[arg(long)]
    endpoint: Option<EndpointId>,
    /// File of `label endpoint_id` lines.
    #[arg(long)]
    matrix: Option<PathBuf>,
    #[arg(long)]
    shell: Option<String>,
    #[arg(long)]
    function: Option<FunctionId>,
    /// Argument passed to the task; repeatable.
    #[arg(long = "arg", allow_hyphen_values = true)]
    args: Vec<String>,
    #[arg(long, env = "CI_REPO_URL")]
    repo_url: Option<String>,
    #[arg(long, env = "CI_REPO_REF")]
    repo_ref: Option<String>,
    /// Remote task timeout in seconds.
    #[arg(long, default_value_t = ci_adapter::inputs::DEFAULT_TIMEOUT_SECONDS)]
    timeout: u64,
    /// Local wait limit in seconds (default: timeout + 120).
    #[arg(long)]
    deadline: Option<f64>,
    #[arg(long, default_value = "ci-artifacts")]
    artifact_dir: PathBuf,
    #[arg(long, env = "CI_BROKER_URL")]
    broker: String,
    /// Site label for --endpoint.
    #[arg(long, default_value = "default")]
    label: String,
    /// Sites run at once with --matrix.
    #[arg(long, default_value_t = ci_adapter::inputs::DEFAULT_FAN_OUT)]
    fan_out: usize,
    /// Status poll interval in seconds.
    #[arg(long, default_value_t = 1.0)]
    poll_interval: f64,
    #[command(flatten)]
    credentials: ci_cli::CredentialArgs,
}

fn invalid(message: impl std::fmt::Display) -> ExitCode {
    eprintln!("ci-run: outcome=invalid_input state=- exit_code=- run_id=- label=- detail={:?}", message.to_string());
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return invalid(e.kind());
        }
    };
    let credentials = match cli.credentials.resolve() {
        Ok(c) => c,
        Err(e) => return invalid(e),
    };
    let sites = match (&cli.endpoint, &cli.matrix) {
        (Some(id), _) => vec![Site {
            label: cli.label.clone(),
            endpoint_id: *id,
        }],
        (None, Some(path)) => match std::fs::read_to_string(path).map_err(|e| e.to_string()).and_then(|t| parse_matrix(&t).map_err(|e| e.to_string())) {
            Ok(sites) => sites,
            Err(e) => return invalid(format!("{}: {e}", path.display())),
        },
        (None, None) => unreachable!("clap requires a target"),
    };
    let work = match (cli.shell, cli.function) {
        (Some(cmd), _) => Work::Shell(cmd),
        (None, Some(f)) => Work::Function(f),
        (None, None) => unreachable!("clap requires work"),
    };
    let mut inputs = StepInputs::new(&cli.broker, credentials, sites, work).with_timeout(cli.timeout);
    inputs.args = cli.args;
    inputs.repo = match (cli.repo_url, cli.repo_ref) {
        (None, None) => None,
        (Some(url), Some(git_ref)) => Some(RepoRef { url, git_ref }),
        _ => return invalid("--repo-url and --repo-ref go together"),
    };
    inputs.artifact_dir = cli.artifact_dir;
    inputs.fan_out = cli.fan_out;
    if let Some(d) = cli.deadline {
        match Duration::try_from_secs_f64(d) {
            Ok(d) => inputs.deadline = d,
            Err(e) => return invalid(format!("--deadline: {e}")),
        }
    }
    match Duration::try_from_secs_f64(cli.poll_interval) {
        Ok(p) if !p.is_zero() => inputs.poll_interval = p,
        _ => return invalid("--poll-interval must be positive"),
    }

    let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
    let (mut out, mut err) = (std::io::stdout().lock(), std::io::stderr().lock());
    let code = if cli.matrix.is_some() {
        rt.block_on(run_matrix(&inputs, &mut out, &mut err)).exit_code
    } else {
        rt.block_on(run_step(&inputs, &mut out, &mut err)).exit_code
    };
    ExitCode::from(code.clamp(0, 255) as u8)
}
