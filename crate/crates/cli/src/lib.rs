//! Experiment pipeline behind the `ossa` binary: dataset synthesis,
//! pretext pretraining, metric fine-tuning, evaluation, protocol
//! comparison, and per-sample attribution.

pub mod commands;
pub mod config;

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{field}: {msg}")]
    Config { field: String, msg: String },
    #[error(transparent)]
    Core(#[from] ossa_core::Error),
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config { .. } => "config",
            CliError::Core(e) => e.category(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ossa", version, about = "Open-set source attribution experiments")]
pub struct Cli {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Config override, `section.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the dataset and write it as a feature file.
    Synth {
        /// Also write this many example PGM patches per class.
        #[arg(long, default_value_t = 0)]
        patches: usize,
    },
    /// Pretrain on the synthetic pretext task.
    Pretrain,
    /// Fine-tune and build class references.
    Train {
        /// Pretrained checkpoint; selects the pretrained protocol defaults.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Score the test split, sweep thresholds, write the report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        references: PathBuf,
    },
    /// Train from scratch and from pretraining on the same data.
    Compare,
    /// Attribute samples from a feature file or a PGM patch.
    Attribute {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        references: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
    },
}

/// Runs one command, writing human-readable progress to `stdout`.
pub fn run(cli: &Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Core(e.into());
    if let Command::Attribute {
        checkpoint,
        references,
        input,
        tau,
    } = &cli.command
    {
        let rows = commands::cmd_attribute(checkpoint, references, input, *tau)?;
        writeln!(stdout, "{}", commands::ATTRIBUTION_HEADER).map_err(io)?;
        for r in rows {
            writeln!(stdout, "{}", r.to_line()).map_err(io)?;
        }
        return Ok(());
    }
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    let out = &cli.out;
    match &cli.command {
        Command::Synth { patches } => {
            let s = commands::cmd_synth(&cfg, out, *patches)?;
            writeln!(stdout, "wrote {} samples to {}", s.samples, s.features.display()).map_err(io)?;
            writeln!(stdout, "dataset_digest = {}", s.digest).map_err(io)?;
        }
        Command::Pretrain => {
            let s = commands::cmd_pretrain(&cfg, out)?;
            writeln!(stdout, "wrote {}", s.checkpoint.display()).map_err(io)?;
            writeln!(stdout, "final_accuracy = {}", s.final_accuracy).map_err(io)?;
            writeln!(stdout, "checkpoint_digest = {}", s.digest).map_err(io)?;
        }
        Command::Train { init } => {
            let s = commands::cmd_train(&cfg, init.as_deref(), out)?;
            writeln!(stdout, "wrote {} and {}", s.checkpoint.display(), s.references.display()).map_err(io)?;
            writeln!(stdout, "base_lr = {}", s.base_lr).map_err(io)?;
            writeln!(stdout, "checkpoint_digest = {}", s.checkpoint_digest).map_err(io)?;
            writeln!(stdout, "references_digest = {}", s.references_digest).map_err(io)?;
        }
        Command::Eval {
            checkpoint,
            references,
        } => {
            let s = commands::cmd_eval(&cfg, checkpoint, references, out)?;
            writeln!(stdout, "wrote {}", s.report.display()).map_err(io)?;
            writeln!(stdout, "auc = {}", s.auc).map_err(io)?;
            writeln!(
                stdout,
                "best tau = {} af1 = {} crr = {}",
                s.best.tau, s.best.af1, s.best.crr
            )
            .map_err(io)?;
        }
        Command::Compare => {
            let s = commands::cmd_compare(&cfg, out)?;
            writeln!(stdout, "auc_scratch = {}", s.auc_scratch).map_err(io)?;
            writeln!(stdout, "auc_pretrained = {}", s.auc_pretrained).map_err(io)?;
            writeln!(stdout, "wrote {}", s.report.display()).map_err(io)?;
        }
        Command::Attribute { .. } => unreachable!("handled above"),
    }
    Ok(())
}
