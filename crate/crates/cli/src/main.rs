mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Settings, UsageError};

/// Cost-aware feature acquisition for nearest-neighbour retrieval.
#[derive(Debug, Parser)]
#[command(name = "frugalnn", version)]
struct Cli {
    /// JSON file with default settings; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split and normalize a raw CSV into train.csv, test.csv and normalization.json.
    Prepare(Settings),
    /// Fit k-means on the training set.
    Cluster(Settings),
    /// Build a cost-balancing clustering tree.
    BuildTree(Settings),
    /// Train a DQN acquisition policy at one budget.
    TrainDqn(Settings),
    /// Compare agents over a grid of budgets.
    Sweep(Settings),
    /// Print a tree file as indented text.
    PrintTree(Settings),
    /// Run the interactive advisor HTTP service.
    Serve {
        #[command(flatten)]
        settings: Settings,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: std::net::SocketAddr,
        /// Static UI bundle served at `/`.
        #[arg(long)]
        ui_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 3600)]
        ttl_secs: u64,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<frugalnn::Error>() {
        Some(frugalnn::Error::Divergence { .. }) => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = match &cli.config {
        Some(path) => Settings::load(path)?,
        None => Settings::default(),
    };
    match cli.command {
        Command::Prepare(s) => commands::prepare(&s.over(file).resolve("prepare")?),
        Command::Cluster(s) => commands::cluster(&s.over(file).resolve("cluster")?),
        Command::BuildTree(s) => commands::build_tree(&s.over(file).resolve("build-tree")?),
        Command::TrainDqn(s) => commands::train_dqn(&s.over(file).resolve("train-dqn")?),
        Command::Sweep(s) => commands::sweep(&s.over(file).resolve("sweep")?),
        Command::PrintTree(s) => commands::print_tree(&s.over(file).resolve("print-tree")?),
        Command::Serve { settings, addr, ui_dir, ttl_secs } => {
            let cfg = settings.over(file).resolve("serve")?;
            commands::serve(&cfg, addr, ui_dir, std::time::Duration::from_secs(ttl_secs))
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
