use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use advrep_cli::config::PipelineConfig;
use advrep_cli::error::CliResult;
use advrep_cli::{init_thread_pool, run_stage, Stage};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    Synth,
    Train,
    Attribute,
    Embed,
    Score,
    Leiden,
    Stratify,
    Report,
    /// Every stage in order.
    All,
}

/// Domain-adversarial training, layer-aware attribution and manifold
/// diagnostics, one stage at a time.
#[derive(Debug, Parser)]
#[command(name = "advrep", version)]
struct Args {
    command: Command,
    /// Pipeline config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Run directory; created if absent.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn stages(cmd: Command) -> Vec<Stage> {
    match cmd {
        Command::Synth => vec![Stage::Synth],
        Command::Train => vec![Stage::Train],
        Command::Attribute => vec![Stage::Attribute],
        Command::Embed => vec![Stage::Embed],
        Command::Score => vec![Stage::Score],
        Command::Leiden => vec![Stage::Leiden],
        Command::Stratify => vec![Stage::Stratify],
        Command::Report => vec![Stage::Report],
        Command::All => Stage::ALL.to_vec(),
    }
}

fn run(args: &Args) -> CliResult<()> {
    init_thread_pool()?;
    let cfg = PipelineConfig::load(&args.config, args.seed)?;
    for stage in stages(args.command) {
        for path in run_stage(stage, cfg.clone(), &args.out)? {
            log::debug!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
