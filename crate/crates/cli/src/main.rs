use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use vct_core::harness::{self, Checkpoint, ExperimentConfig, TrainOptions};

#[derive(Parser)]
#[command(name = "vct", version, about = "Vision-centric audio-visual segmentation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Replace an existing non-empty output directory.
        #[arg(long)]
        overwrite: bool,
    },
    /// Train a model; writes final.ckpt, best.ckpt and train_log.jsonl.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Accept a resumed checkpoint whose config differs.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint and write an M_J / M_F report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Require the checkpoint to have been trained with this config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Write per-query mask probability maps of one sample as PGM files.
    DumpLogits {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sample: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, seed, overwrite } => {
            let cfg = ExperimentConfig::load(&config)?;
            let summary = harness::gen_data(&cfg, &out, seed, overwrite)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Train { config, data, out, resume, force } => {
            let cfg = ExperimentConfig::load(&config)?;
            let opts = TrainOptions { resume, force };
            let outcome = harness::run_train(&cfg, &data, &out, &opts, |line| println!("{line}"))
                .with_context(|| format!("training on {}", data.display()))?;
            eprintln!(
                "finished {} iterations, train M_J {:.4}; checkpoints in {}",
                outcome.last.iteration,
                outcome.final_report.m_j,
                out.display()
            );
        }
        Command::Eval { ckpt, data, report, config, force } => {
            if let Some(path) = config {
                let cfg = ExperimentConfig::load(&path)?;
                Checkpoint::load(&ckpt)?.check_config(&cfg, force)?;
            }
            let r = harness::run_eval(&ckpt, &data, &report)?;
            println!("M_J {:.4}  M_F {:.4}  ({} samples)", r.m_j, r.m_f, r.n_samples);
        }
        Command::DumpLogits { ckpt, data, sample, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let written = harness::dump_logit_maps(&ck, &data, sample, &out)?;
            for p in &written {
                println!("{}", p.display());
            }
            eprintln!("{} maps written", written.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
