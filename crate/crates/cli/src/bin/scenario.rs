use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use obstack_cli::{EXIT_INVALID, EXIT_OK, EXIT_RUNTIME};
use obstack_core::scenario::{run_scenario, RunOptions, Scenario, ScenarioError, StackEndpoints};

#[derive(Parser)]
#[command(name = "scenario", about = "Drive scripted workloads through a running stack", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Push a scenario's samples and check its expectations.
    Run {
        #[arg(long)]
        file: PathBuf,
        /// Base URL of the api, e.g. http://127.0.0.1:8080
        #[arg(long)]
        api: String,
        /// Bearer token; defaults to API_ADMIN_TOKEN.
        #[arg(long)]
        token: Option<String>,
        /// Read API_ADMIN_TOKEN from this file when no token is given.
        #[arg(long)]
        env_file: Option<PathBuf>,
        /// Push at wall-clock pace instead of the virtual clock.
        #[arg(long)]
        realtime: bool,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
}

#[tokio::main]
async fn main() -> ExitCode {
    obstack_cli::init_logging();
    let Command::Run {
        file,
        api,
        token,
        env_file,
        realtime,
        json,
    } = Cli::parse().command;
    let file_token = match env_file.as_deref().map(obstack_core::stack::load_env_file) {
        Some(Ok(vars)) => vars.get("API_ADMIN_TOKEN").cloned(),
        Some(Err(e)) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_RUNTIME as u8);
        }
        None => None,
    };
    let code = match Scenario::load(&file) {
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_INVALID
        }
        Ok(scenario) => {
            let endpoints = StackEndpoints {
                api,
                token: token
                    .or(file_token)
                    .or_else(|| std::env::var("API_ADMIN_TOKEN").ok())
                    .unwrap_or_default(),
            };
            match run_scenario(&scenario, &endpoints, RunOptions { realtime }).await {
                Ok(report) => {
                    if json {
                        println!("{}", serde_json::to_string_pretty(&report).unwrap_or_default());
                    } else {
                        print!("{report}");
                    }
                    if report.ok() {
                        EXIT_OK
                    } else {
                        EXIT_INVALID
                    }
                }
                Err(e @ ScenarioError::StackUnreachable(_)) => {
                    eprintln!("error: {e}");
                    EXIT_RUNTIME
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    EXIT_INVALID
                }
            }
        }
    };
    ExitCode::from(code as u8)
}
