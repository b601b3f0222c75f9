use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cdkd_cli::commands;
use cdkd_cli::config::{Overrides, Preset};

#[derive(Parser)]
#[command(name = "cdkd", version, about = "Channel distillation, guided KD and early-decay teacher training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// Overrides [run] seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides [run] out_dir.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Base hyperparameters the config file is layered over.
    #[arg(long, value_parser = ["imagenet-recipe", "cifar-recipe"])]
    preset: Option<String>,
}

impl Common {
    fn overrides(&self) -> anyhow::Result<Overrides> {
        Ok(Overrides {
            preset: self.preset.as_deref().map(Preset::parse).transpose()?,
            seed: self.seed,
            out_dir: self.out_dir.clone(),
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a network from scratch with cross entropy.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Distill a trained teacher into the [model.student] network.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher_ckpt: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Top-1/top-5 error of a checkpoint on the validation split.
    Eval {
        /// Checkpoint to evaluate.
        #[arg(long, required_unless_present = "teacher_ckpt")]
        ckpt: Option<PathBuf>,
        /// Evaluate a teacher checkpoint.
        #[arg(long, conflicts_with = "ckpt")]
        teacher_ckpt: Option<PathBuf>,
        /// Data description; the default synthetic set when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Use the best-validation parameters instead of the final ones.
        #[arg(long)]
        best: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Compare the engine against the reference oracles.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render a metrics CSV as an SVG chart.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        /// Output file; defaults to the CSV path with an .svg extension.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::TrainTeacher { config, resume, common } => {
            commands::train_teacher(&config, &common.overrides()?, resume.as_deref())?;
        }
        Command::Distill {
            config,
            teacher_ckpt,
            resume,
            common,
        } => {
            commands::distill(&config, &common.overrides()?, &teacher_ckpt, resume.as_deref())?;
        }
        Command::Eval {
            ckpt,
            teacher_ckpt,
            config,
            best,
            common,
        } => {
            let path = ckpt.or(teacher_ckpt).expect("clap enforces one checkpoint");
            commands::eval(&path, config.as_deref(), &common.overrides()?, best)?;
        }
        Command::Gradcheck { seed } => commands::gradcheck(seed)?,
        Command::Plot { csv, out } => {
            commands::plot(&csv, out.as_deref())?;
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
