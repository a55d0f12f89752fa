//! Pipeline entrypoint: simulate -> complexity -> gen -> train -> finetune
//! -> analyze -> report, driven by a single TOML config.
//!
//! Exit codes: 0 success, 2 config error, 3 missing prerequisite,
//! 4 numeric failure.

mod config;
mod pipeline;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use config::{ExperimentConfig, CONFIG_TEMPLATE};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing prerequisite: {0}")]
    Missing(String),
    #[error("{0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Numeric(_) | CliError::Io(_) | CliError::Json(_) => 4,
        }
    }
}

#[derive(Parser)]
#[command(name = "ecalab", version, about = "cellular-automata pretraining laboratory")]
struct Cli {
    /// experiment config file
    #[arg(long, global = true, default_value = "ecalab.toml")]
    config: PathBuf,
    /// output root; defaults to $ECALAB_OUT or ./runs/default
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// worker threads for rule-parallel stages
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// write a fully commented config template
    ConfigInit {
        /// where to write the template
        #[arg(long, default_value = "ecalab.toml")]
        path: PathBuf,
        /// overwrite an existing file
        #[arg(long)]
        force: bool,
    },
    /// evolve each configured rule and store the spacetime grids
    Simulate,
    /// compute the complexity measures for each rule
    Complexity,
    /// generate pretraining windows, reasoning tasks, and chess data
    Gen,
    /// pretrain one model per rule x horizon x seed
    Train,
    /// frozen-backbone finetuning on the downstream tasks
    Finetune,
    /// aggregate results: correlations, attention, CKA, MDS
    Analyze,
    /// assemble the summary tables
    Report,
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os("ECALAB_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs/default"))
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("invalid thread count: {e}")))?;
    }
    if let Command::ConfigInit { path, force } = &cli.command {
        if path.exists() && !force {
            return Err(CliError::Config(format!(
                "{} exists; pass --force to overwrite",
                path.display()
            )));
        }
        std::fs::write(path, CONFIG_TEMPLATE)?;
        println!("wrote {}", path.display());
        return Ok(());
    }

    let cfg = ExperimentConfig::load(&cli.config)?;
    let out = out_dir(cli);
    std::fs::create_dir_all(&out)?;
    match &cli.command {
        Command::ConfigInit { .. } => unreachable!("handled above"),
        Command::Simulate => pipeline::cmd_simulate(&cfg, &out),
        Command::Complexity => pipeline::cmd_complexity(&cfg, &out),
        Command::Gen => pipeline::cmd_gen(&cfg, &out),
        Command::Train => pipeline::cmd_train(&cfg, &out),
        Command::Finetune => pipeline::cmd_finetune(&cfg, &out),
        Command::Analyze => pipeline::cmd_analyze(&cfg, &out),
        Command::Report => pipeline::cmd_report(&cfg, &out),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
