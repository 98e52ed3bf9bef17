use std::path::PathBuf;

use anyhow::{Context, Result};
use attrbench_cli::{run, BenchConfig, Filter, Stage};
use clap::{Args, Parser, Subcommand};

/// Attribution faithfulness benchmark over synthetic clinical sequences.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train, test and interpretation splits.
    GenData(Common),
    /// Train every (task, model) pair.
    Train(Common),
    /// Attribute the interpretation split with every method.
    Attribute(Common),
    /// Evaluate faithfulness and write tables and plots.
    Report(Common),
    /// Run every stage in order, resuming finished work.
    All(Common),
}

#[derive(Args)]
struct Common {
    /// TOML config file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replace the data, training and benchmark seeds with one value.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Worker threads (0 uses every core).
    #[arg(long)]
    workers: Option<usize>,
    /// Overrides the config's output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Restrict to these task, model or method names. Repeatable.
    #[arg(long, value_delimiter = ',')]
    only: Vec<String>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let (stage, common) = match cli.command {
        Command::GenData(c) => (Stage::GenData, c),
        Command::Train(c) => (Stage::Train, c),
        Command::Attribute(c) => (Stage::Attribute, c),
        Command::Report(c) => (Stage::Report, c),
        Command::All(c) => (Stage::All, c),
    };
    let mut config = match &common.config {
        Some(path) => BenchConfig::load(path)?,
        None => BenchConfig::default(),
    };
    if let Some(seed) = common.seed_override {
        config.override_seeds(seed);
    }
    if let Some(w) = common.workers {
        config.workers = w;
    }
    if let Some(dir) = common.output_dir {
        config.output_dir = dir;
    }
    if config.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build_global()
            .context("starting worker pool")?;
    }
    let filter = Filter::parse(&common.only)?;
    run(&config, stage, &filter)
}
