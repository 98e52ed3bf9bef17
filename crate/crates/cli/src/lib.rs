//! Benchmark orchestration: configuration, the staged pipeline and the
//! artifacts it leaves behind.

pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod plot;

use anyhow::{Context, Result};

pub use config::BenchConfig;
pub use manifest::Manifest;
pub use pipeline::Filter;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    GenData,
    Train,
    Attribute,
    Report,
    All,
}

/// Runs `stage` (or every stage for [`Stage::All`]) against the manifest
/// in `config.output_dir`.
pub fn run(config: &BenchConfig, stage: Stage, filter: &Filter) -> Result<()> {
    config.validate()?;
    let mut manifest = Manifest::open(&config.output_dir, &config.hash())
        .with_context(|| format!("opening output directory {}", config.output_dir.display()))?;
    let all = stage == Stage::All;
    if all || stage == Stage::GenData {
        pipeline::gen_data(config, &mut manifest, filter)?;
    }
    if all || stage == Stage::Train {
        pipeline::train_models(config, &mut manifest, filter)?;
    }
    if all || stage == Stage::Attribute {
        pipeline::attribute_all(config, &mut manifest, filter)?;
    }
    if all || stage == Stage::Report {
        pipeline::report(config, &mut manifest, filter)?;
    }
    Ok(())
}
