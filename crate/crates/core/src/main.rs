use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use milret::milopt::{Lock, LossKind};
use milret::pipeline::{Pipeline, PipelineConfig, PipelineError};

#[derive(Parser)]
#[command(
    name = "milret",
    version,
    about = "Multiple-instance image/text retrieval toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML pipeline configuration; relative paths resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for splits, adapter init, batch order and synthetic data.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Validate inputs and run the stage without writing anything.
    #[arg(long, global = true)]
    dry_run: bool,
    #[arg(long, global = true, value_enum)]
    prefilter: Option<Toggle>,
    #[arg(long, global = true, value_parser = parse_loss)]
    loss: Option<LossKind>,
    #[arg(long, global = true, value_parser = parse_lock)]
    lock: Option<Lock>,
    /// Low-rank adapter rank; 0 freezes the adapted sides.
    #[arg(long, global = true)]
    rank: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and clean the corpus layouts.
    Ingest,
    /// Merge fragmented text blocks.
    Merge,
    /// Build image-to-text bags.
    Bag,
    /// Group identical images and merge their bags.
    Dedup,
    /// Write the train/test split.
    Split,
    /// Fine-tune the adapter.
    Train,
    /// Compute retrieval recall on the test documents.
    Eval {
        /// Score the raw embeddings instead of the trained adapter.
        #[arg(long)]
        untrained: bool,
    },
    /// Print the retrieval table.
    Report,
    /// Generate a synthetic corpus into the corpus directory.
    Synth,
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    s.parse()
}

fn parse_lock(s: &str) -> Result<Lock, String> {
    s.parse()
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
            let base = path.parent().map(PathBuf::from).unwrap_or_default();
            PipelineConfig::from_toml(&text, &base)?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(p) = cli.prefilter {
        cfg.dedup.use_feature_prefilter = matches!(p, Toggle::On);
    }
    if let Some(kind) = cli.loss {
        cfg.loss.kind = kind;
    }
    if let Some(lock) = cli.lock {
        cfg.adapter.lock = lock;
    }
    if let Some(rank) = cli.rank {
        cfg.adapter.rank = Some(rank);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let pipeline = Pipeline::new(load_config(cli)?, cli.dry_run);
    let outcome = match cli.command {
        Command::Ingest => pipeline.ingest(),
        Command::Merge => pipeline.merge(),
        Command::Bag => pipeline.bag(),
        Command::Dedup => pipeline.dedup(),
        Command::Split => pipeline.split(),
        Command::Train => pipeline.train(),
        Command::Eval { untrained } => pipeline.eval(untrained),
        Command::Report => pipeline.report(),
        Command::Synth => pipeline.synth(),
    }
    .context("stage failed")?;
    match cli.command {
        Command::Report => print!("{}", outcome.message),
        _ => {
            let verb = if cli.dry_run { "would write" } else { "wrote" };
            eprintln!(
                "{} ({verb} {} files)",
                outcome.message,
                outcome.written.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (class, code) = match err.downcast_ref::<PipelineError>() {
                Some(e) => (e.class(), e.exit_code()),
                None => ("Internal", 1),
            };
            let cause = err.root_cause().to_string();
            let msg = match err.downcast_ref::<PipelineError>() {
                Some(e) => e.to_string(),
                None => cause,
            };
            eprintln!("error: {class}: {}", msg.replace('\n', " "));
            ExitCode::from(code as u8)
        }
    }
}
