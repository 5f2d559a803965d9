use std::path::{Path, PathBuf};
use std::process::ExitCode;

use avpyramid_core::{Error, Result};
use avpyramid_harness::ablation::run_ablation;
use avpyramid_harness::commands::{run_gen_corpus, run_generate, run_retrieval_eval};
use avpyramid_harness::train::run_pretrain;
use avpyramid_harness::{exit_code, ExperimentConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "avpyramid",
    version,
    about = "Multi-scale video-audio pretraining experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FromCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Checkpoint directory; defaults to `<out>/checkpoints/final`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl FromCheckpoint {
    fn checkpoint(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.common.out.join("checkpoints").join("final"))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the train, test, probe and reference splits to disk.
    GenCorpus(Common),
    /// Train, checkpoint every epoch, then evaluate.
    Pretrain(Common),
    /// Generate audio for the test videos from a checkpoint.
    Generate(FromCheckpoint),
    /// Retrieval recall in both directions from a checkpoint.
    EvalRetrieval(FromCheckpoint),
    /// Component grid plus the configured sweeps.
    Ablate(Common),
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus(c) => {
            let cfg = load(&c.config)?;
            for (split, m) in run_gen_corpus(&cfg, c.seed, &c.out)? {
                println!("{}: {} pairs", split.name(), m.count);
            }
        }
        Command::Pretrain(c) => {
            let cfg = load(&c.config)?;
            let m = run_pretrain(&cfg, c.seed, &c.out)?;
            println!("{}", avpyramid_core::evalkit::EvalReport::csv_header());
            println!("{}", m.report.csv_row());
        }
        Command::Generate(f) => {
            let cfg = load(&f.common.config)?;
            let r = run_generate(&cfg, f.common.seed, &f.checkpoint(), &f.common.out)?;
            println!("{}", avpyramid_core::evalkit::EvalReport::csv_header());
            println!("{}", r.csv_row());
        }
        Command::EvalRetrieval(f) => {
            let cfg = load(&f.common.config)?;
            let r = run_retrieval_eval(&cfg, f.common.seed, &f.checkpoint(), &f.common.out)?;
            println!("{}", avpyramid_core::evalkit::EvalReport::csv_header());
            println!("{}", r.csv_row());
        }
        Command::Ablate(c) => {
            let cfg = load(&c.config)?;
            let rows = run_ablation(&cfg, c.seed, &c.out)?;
            let failed: Vec<&str> = rows
                .iter()
                .filter(|(_, r)| r.error.is_some())
                .map(|(_, r)| r.label.as_str())
                .collect();
            println!("{} runs, {} failed", rows.len(), failed.len());
            if !failed.is_empty() {
                return Err(Error::Protocol(format!("failed runs: {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
