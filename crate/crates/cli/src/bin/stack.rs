use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use obstack_cli::supervisor::{self, ChildSpec, MAX_RESTARTS, RESTART_WINDOW};
use obstack_cli::{absolute, cmd_components_list, cmd_plan, cmd_validate, load_env, process_groups, print_report, EXIT_INVALID, EXIT_OK, EXIT_RUNTIME};
use obstack_core::runtime;
use obstack_core::stack::{Component, StackConfig};

#[derive(Parser)]
#[command(name = "stack", about = "Validate, plan and run an observability stack", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a stack config for missing layers and broken dependencies.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the merged, ordered deployment plan.
    Plan {
        #[arg(long)]
        config: PathBuf,
        #[arg(short = 'o', long)]
        output: Option<PathBuf>,
        #[arg(long)]
        env_file: Option<PathBuf>,
    },
    /// Launch the enabled components as supervised processes.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        env_file: Option<PathBuf>,
    },
    /// Inspect available components.
    Components {
        #[command(subcommand)]
        action: ComponentsAction,
    },
    /// Run one process group in the foreground (used by `run`).
    #[command(hide = true)]
    Component {
        /// `server` or `collector`.
        process: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        env_file: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ComponentsAction {
    List,
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        match signal(SignalKind::terminate()) {
            Ok(mut term) => {
                tokio::select! {
                    _ = tokio::signal::ctrl_c() => {}
                    _ = term.recv() => {}
                }
            }
            Err(_) => {
                let _ = tokio::signal::ctrl_c().await;
            }
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
    tracing::info!("shutdown requested");
}

fn load_valid(config: &std::path::Path) -> Result<StackConfig, i32> {
    let cfg = StackConfig::load(config).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_INVALID
    })?;
    let report = cfg.validate();
    if !report.is_valid() {
        let _ = print_report(&mut std::io::stderr(), &report);
        return Err(EXIT_INVALID);
    }
    Ok(cfg)
}

async fn run(config: PathBuf, env_file: Option<PathBuf>) -> i32 {
    let cfg = match load_valid(&config) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let env = match load_env(&cfg, env_file.as_deref()) {
        Ok(e) => e,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_RUNTIME;
        }
    };
    let exe = match std::env::current_exe() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot locate own executable: {e}");
            return EXIT_RUNTIME;
        }
    };
    let config = absolute(&config);
    let specs: Vec<ChildSpec> = process_groups(&cfg)
        .into_iter()
        .map(|group| ChildSpec {
            name: group.clone(),
            program: exe.clone(),
            args: vec!["component".into(), group, "--config".into(), config.display().to_string()],
            env: env.clone(),
        })
        .collect();
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let sup = tokio::task::spawn_blocking(move || supervisor::supervise(specs, &flag, Duration::from_millis(300), (MAX_RESTARTS, RESTART_WINDOW)));
    tokio::pin!(sup);
    let result = tokio::select! {
        r = &mut sup => r,
        _ = shutdown_signal() => {
            stop.store(true, Ordering::SeqCst);
            sup.await
        }
    };
    match result {
        Ok(Ok(())) => EXIT_OK,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
        Err(e) => {
            eprintln!("error: supervisor failed: {e}");
            EXIT_RUNTIME
        }
    }
}

async fn component(process: String, config: PathBuf, env_file: Option<PathBuf>) -> i32 {
    let cfg = match load_valid(&config) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let env = match load_env(&cfg, env_file.as_deref()) {
        Ok(e) => e,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_RUNTIME;
        }
    };
    let (resolved, _) = cfg.resolve();
    let enabled: BTreeSet<Component> = cfg.enabled().into_iter().filter(|c| c.process() == process).collect();
    let result = match process.as_str() {
        "server" => runtime::run_server(&enabled, &resolved, &env, shutdown_signal()).await,
        "collector" => runtime::run_collector(&resolved, &env, shutdown_signal()).await,
        other => {
            eprintln!("error: unknown process group `{other}` (expected server or collector)");
            return EXIT_INVALID;
        }
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    obstack_cli::init_logging();
    let cli = Cli::parse();
    let mut stdout = std::io::stdout();
    let code = match cli.command {
        Command::Validate { config } => cmd_validate(&config, &mut stdout).unwrap_or(EXIT_RUNTIME),
        Command::Plan { config, output, env_file } => {
            cmd_plan(&config, env_file.as_deref(), output.as_deref(), &mut stdout).unwrap_or(EXIT_RUNTIME)
        }
        Command::Run { config, env_file } => run(config, env_file).await,
        Command::Components { action: ComponentsAction::List } => cmd_components_list(&mut stdout).unwrap_or(EXIT_RUNTIME),
        Command::Component { process, config, env_file } => component(process, config, env_file).await,
    };
    ExitCode::from(code as u8)
}
