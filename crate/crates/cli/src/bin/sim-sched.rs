use std::path::PathBuf;
use std::process::ExitCode;

use ci_providers::sim::{status_word, SimConfig, SimStore, TimeMode};
use clap::{Parser, Subcommand};

/// Command-line front end of the simulated batch scheduler, in the shape
/// of a real scheduler CLI so batch templates can call it.
#[derive(Parser)]
#[command(name = "sim-sched", version)]
struct Cli {
    /// State directory.
    #[arg(long, env = "SIM_SCHED_DIR")]
    dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reset the scheduler with a new configuration.
    Init {
        #[arg(long, default_value_t = 0)]
        queue_delay_ms: i64,
        #[arg(long, default_value_t = 4)]
        max_concurrent: usize,
        #[arg(long)]
        default_walltime_ms: Option<i64>,
        #[arg(long, default_value_t = 0)]
        jitter_ms: i64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Only `tick` advances time.
        #[arg(long)]
        r#virtual: bool,
    },
    /// Queue a job script; prints `Submitted batch job <id>`.
    Submit { script: PathBuf },
    /// Print PENDING, RUNNING, COMPLETED or FAILED.
    Status { job_id: String },
    Cancel { job_id: String },
    /// Advance simulated time to NOW_MS; prints the resulting events.
    Tick { now_ms: i64 },
    /// Print the submission log, one JSON object per line.
    Log,
    /// Print the event trace, one JSON object per line.
    Trace,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sim-sched: {e}");
            ExitCode::FAILURE
        }
    }
}

fn json_lines<T: serde::Serialize>(items: &[T]) {
    for item in items {
        println!("{}", serde_json::to_string(item).expect("serializable"));
    }
}

fn run(cli: Cli) -> Result<(), ci_providers::ProviderError> {
    match cli.command {
        Command::Init {
            queue_delay_ms,
            max_concurrent,
            default_walltime_ms,
            jitter_ms,
            seed,
            r#virtual,
        } => SimStore::init(
            &cli.dir,
            SimConfig {
                queue_delay_ms,
                max_concurrent,
                default_walltime_ms,
                jitter_ms,
                seed,
                time_mode: if r#virtual { TimeMode::Virtual } else { TimeMode::WallClock },
            },
        ),
        Command::Submit { script } => {
            let id = SimStore::open(&cli.dir)?.submit(&script.to_string_lossy())?;
            println!("Submitted batch job {id}");
            Ok(())
        }
        Command::Status { job_id } => {
            println!("{}", status_word(SimStore::open(&cli.dir)?.status(&job_id)?));
            Ok(())
        }
        Command::Cancel { job_id } => SimStore::open(&cli.dir)?.cancel(&job_id),
        Command::Tick { now_ms } => {
            json_lines(&SimStore::open(&cli.dir)?.tick(now_ms)?);
            Ok(())
        }
        Command::Log => {
            json_lines(&SimStore::open(&cli.dir)?.state().submission_log);
            Ok(())
        }
        Command::Trace => {
            json_lines(&SimStore::open(&cli.dir)?.state().trace);
            Ok(())
        }
    }
}
