use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tsagent::config::{AnchorSource, RunConfig};
use tsagent::data::Task;
use tsagent::run::{dump_oracle_anchors, execute, Command};
use tsagent::{Error, ErrorKind};

#[derive(Parser)]
#[command(name = "tsagent", version, about = "Tool-driven multi-agent time series analysis")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Evaluate on the test split, loading a checkpoint when one is given.
    Run {
        #[command(flatten)]
        common: Common,
        /// Parameters from a previous `train`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train, save a checkpoint and evaluate.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate once per flag setting, e.g. `--flag enable_tools=false` or
    /// `--flag completion_strategy=ode|linear|quadratic|repeat`.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long = "flag")]
        flags: Vec<String>,
    },
    /// Write offline oracle anchors for every window of the dataset.
    OracleAnchors {
        #[command(flatten)]
        common: Common,
    },
    /// Parse and check a configuration file.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Override the configured task.
    #[arg(long, value_parser = parse_task)]
    task: Option<Task>,
    /// Use the offline anchor oracle; no network access.
    #[arg(long)]
    offline: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

fn parse_task(s: &str) -> Result<Task, String> {
    Task::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| format!("unknown task `{s}`"))
}

/// Load the file, resolve a relative data path against its directory, apply overrides.
fn load(path: &PathBuf, common: Option<&Common>) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(path)?;
    if let (Some(data), Some(dir)) = (cfg.data.path.as_mut(), path.parent()) {
        if data.is_relative() {
            *data = dir.join(&*data);
        }
    }
    if let Some(c) = common {
        if let Some(task) = c.task {
            cfg.task = task;
        }
        if c.offline {
            cfg.anchors.source = AnchorSource::Offline;
        }
        if let Some(seed) = c.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &c.out {
            cfg.output_dir = out.clone();
        }
        if let Some(w) = c.workers {
            cfg.workers = w;
        }
        cfg.validate()?;
    }
    Ok(cfg)
}

fn dispatch(cmd: Cmd) -> Result<(), Error> {
    match cmd {
        Cmd::Run { common, checkpoint } => {
            let mut cfg = load(&common.config, Some(&common))?;
            if checkpoint.is_some() {
                cfg.eval.checkpoint = checkpoint;
            }
            report(execute(&cfg, Command::Run, &[])?)
        }
        Cmd::Train { common } => report(execute(&load(&common.config, Some(&common))?, Command::Train, &[])?),
        Cmd::Ablate { common, flags } => report(execute(&load(&common.config, Some(&common))?, Command::Ablate, &flags)?),
        Cmd::OracleAnchors { common } => {
            let (path, records) = dump_oracle_anchors(&load(&common.config, Some(&common))?)?;
            println!("{} windows -> {}", records.len(), path.display());
            Ok(())
        }
        Cmd::ValidateConfig { config } => {
            let cfg = load(&config, None)?;
            println!("ok: {} task, seed {}", cfg.task.name(), cfg.seed);
            Ok(())
        }
    }
}

fn report(r: tsagent::run::RunReport) -> Result<(), Error> {
    let summary = std::fs::read_to_string(&r.artifacts.summary).map_err(|e| Error::io(&r.artifacts.summary, e))?;
    print!("{summary}");
    println!("reports in {}", r.config.output_dir.display());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Transport => 4,
        ErrorKind::Internal => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
