use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rollout::config::{parse_config, resolve_with, ConfigError, LoadedConfig};
use rollout::formats::{replay_trace, TraceEvent};
use rollout::runner::{self, default_registry, dispatcher_name, RunError};

/// Exit codes, one per failure mode.
mod exit {
    pub const USAGE: u8 = 2;
    pub const CONFIG_PARSE: u8 = 3;
    pub const CONFIG_INVALID: u8 = 4;
    pub const IO: u8 = 5;
    pub const DISPATCH: u8 = 6;
    pub const BACKEND: u8 = 7;
    pub const TRACE_INVALID: u8 = 8;
    pub const BATCH: u8 = 9;
}

#[derive(Parser)]
#[command(name = "rollout", version, about = "Dispatch agent rollouts and write training batches")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the configured batch.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dispatcher: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the same simulated batch under several dispatchers.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated dispatcher names or aliases (batch, bounded, pipeline, priority).
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        policies: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config and report every violation.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
    /// Check a timeline file and print its busy-time summary.
    ReplayTrace {
        #[arg(long)]
        trace: PathBuf,
    },
}

struct Failure(u8, String);

fn load(path: &Path, dispatcher: Option<&str>, seed: Option<u64>) -> Result<LoadedConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure(exit::CONFIG_PARSE, format!("cannot read {}: {e}", path.display())))?;
    let mut config = parse_config(&text, path).map_err(config_failure)?;
    if let Some(d) = dispatcher {
        config.dispatcher.name = Some(dispatcher_name(d).to_string());
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    resolve_with(config, path.parent().unwrap_or(Path::new(".")), &default_registry()).map_err(config_failure)
}

fn config_failure(e: ConfigError) -> Failure {
    let code = match e {
        ConfigError::Validation(_) => exit::CONFIG_INVALID,
        _ => exit::CONFIG_PARSE,
    };
    Failure(code, e.to_string())
}

fn run_failure(e: RunError) -> Failure {
    let code = match &e {
        RunError::Write { .. } => exit::IO,
        RunError::Backend(_) => exit::BACKEND,
        RunError::Batch(_) => exit::BATCH,
        RunError::Usage(_) => exit::USAGE,
        RunError::Dispatch(_) | RunError::Compare(_) | RunError::Live(_) => exit::DISPATCH,
    };
    Failure(code, e.to_string())
}

fn main_inner(cli: Cli) -> Result<(), Failure> {
    let registry = default_registry();
    match cli.cmd {
        Cmd::Run { config, dispatcher, seed, out } => {
            let loaded = load(&config, dispatcher.as_deref(), seed)?;
            let s = runner::run(&loaded, &registry, out.as_deref()).map_err(run_failure)?;
            println!(
                "{} trajectories ({} failed), {} rows written to {}",
                s.trajectories,
                s.failed,
                s.exported,
                s.out_dir.display()
            );
        }
        Cmd::Compare { config, policies, seed, out } => {
            let loaded = load(&config, None, seed)?;
            if policies.len() < 2 {
                return Err(Failure(exit::USAGE, "--policies needs at least two names".into()));
            }
            let (report, files) = runner::compare(&loaded, &registry, &policies, out.as_deref()).map_err(run_failure)?;
            for p in &report.policies {
                println!(
                    "{:<22} makespan {:>8}  gpu mean {:.3} var {:.4}",
                    p.name, p.makespan, p.mean_gpu_utilization, p.gpu_utilization_variance
                );
            }
            let (a, b) = (&report.policies[0], &report.policies[1]);
            println!("speedup {}/{}: {:.3}", b.name, a.name, a.makespan as f64 / b.makespan.max(1) as f64);
            if let Some(f) = files.last() {
                println!("wrote {}", f.display());
            }
        }
        Cmd::ValidateConfig { config } => {
            let loaded = load(&config, None, None)?;
            println!(
                "ok: {} tasks, {} planned trajectories, dispatcher {}",
                loaded.tasks.len(),
                loaded.planned_trajectories(),
                loaded.config.dispatcher.name()
            );
        }
        Cmd::ReplayTrace { trace } => {
            let text = std::fs::read_to_string(&trace)
                .map_err(|e| Failure(exit::IO, format!("cannot read {}: {e}", trace.display())))?;
            let events: Vec<TraceEvent> =
                serde_json::from_str(&text).map_err(|e| Failure(exit::TRACE_INVALID, e.to_string()))?;
            let summary = replay_trace(&events).map_err(|e| Failure(exit::TRACE_INVALID, e.to_string()))?;
            let out = serde_json::json!({
                "events": summary.events,
                "span_us": summary.span_us,
                "busy_us": summary.busy_us,
                "threads": summary.threads,
                "utilization": summary.utilization(),
            });
            println!("{}", serde_json::to_string_pretty(&out).expect("summary serializes"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
