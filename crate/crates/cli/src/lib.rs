//! Stage-by-stage orchestration of the advrep experiment. Each stage reads
//! its inputs from a run directory and writes its outputs back into it, so
//! any stage can be rerun on its own.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod report;
pub mod stages;

use std::fmt;
use std::path::{Path, PathBuf};

use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};
use crate::stages::Context;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "ADVREP_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Synth,
    Train,
    Attribute,
    Embed,
    Score,
    Leiden,
    Stratify,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Synth,
        Stage::Train,
        Stage::Attribute,
        Stage::Embed,
        Stage::Score,
        Stage::Leiden,
        Stage::Stratify,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Train => "train",
            Stage::Attribute => "attribute",
            Stage::Embed => "embed",
            Stage::Score => "score",
            Stage::Leiden => "leiden",
            Stage::Stratify => "stratify",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Runs one stage against `out` and returns the files it wrote.
pub fn run_stage(stage: Stage, cfg: PipelineConfig, out: &Path) -> CliResult<Vec<PathBuf>> {
    let ctx = Context::new(cfg, out);
    log::info!("stage {stage} -> {}", out.display());
    match stage {
        Stage::Synth => ctx.synth(),
        Stage::Train => ctx.train(),
        Stage::Attribute => ctx.attribute(),
        Stage::Embed => ctx.embed(),
        Stage::Score => ctx.score(),
        Stage::Leiden => ctx.leiden(),
        Stage::Stratify => ctx.stratify(),
        Stage::Report => report::write_report(&ctx),
    }
}

/// Runs every stage in order.
pub fn run_all(cfg: &PipelineConfig, out: &Path) -> CliResult<()> {
    for stage in Stage::ALL {
        run_stage(stage, cfg.clone(), out)?;
    }
    Ok(())
}

/// Builds the global rayon pool, honouring `ADVREP_THREADS` when set.
pub fn init_thread_pool() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    // A pool that already exists (tests calling twice) keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}
