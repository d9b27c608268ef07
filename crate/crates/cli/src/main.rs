mod commands;
mod config;
mod run_dir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] resnet_asr::Error),
}

impl CliError {
    /// 2 usage/config, 3 data, 4 numeric divergence.
    pub fn exit_code(&self) -> u8 {
        use resnet_asr::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                E::Diverged { .. } | E::NonFinite(_) | E::NonFiniteGradient(_) => 4,
                E::Config(_)
                | E::TransferMismatch(_)
                | E::InvalidModel(_)
                | E::InvalidShape { .. }
                | E::ShapeMismatch { .. }
                | E::KernelTooLarge { .. }
                | E::InvalidRate(_)
                | E::MissingParam(_)
                | E::BatchTooSmall(_) => 2,
                _ => 3,
            },
        }
    }
}

#[derive(Parser)]
#[command(
    name = "resnet-asr",
    version,
    about = "Isolated-digit recognition with residual networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic digit corpus with its clean and noisy sets.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the target network from scratch.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the network that later seeds a fine-tuning run.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Initialize from a checkpoint, freeze prefixes and train at the fine-tuning rate.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        from: PathBuf,
        /// Overrides `freeze_prefixes` from the config.
        #[arg(long, num_args = 1..)]
        freeze: Option<Vec<String>>,
    },
    /// Score a checkpoint on a manifest and write report files.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reject the checkpoint unless it matches the network this config describes.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Merge several eval directories into one table and WER chart.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::SynthCorpus {
            out,
            per_class,
            seed,
        } => commands::synth_corpus(&out, per_class, seed),
        Command::Train { config } => commands::train(&config, commands::Kind::Train),
        Command::Pretrain { config } => commands::train(&config, commands::Kind::Pretrain),
        Command::Finetune {
            config,
            from,
            freeze,
        } => commands::finetune(&config, &from, freeze),
        Command::Eval {
            ckpt,
            manifest,
            out,
            config,
        } => commands::eval(&ckpt, &manifest, &out, config.as_deref()),
        Command::Compare { runs, out } => commands::compare(&runs, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
