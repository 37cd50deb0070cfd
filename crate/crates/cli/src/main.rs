//! `nas`: synthetic latency tables, superkernel search, derivation,
//! retraining and the validation harnesses, one subcommand each.
//!
//! Exit codes: 0 on success, 1 for usage errors (bad arguments, unreadable
//! or invalid inputs), 2 when a check or artifact validation fails.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use nas_core::{Error as CoreError, SearchConfig};

use crate::commands::Run;
use crate::config::RunConfig;

/// A check ran and did not pass.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct CheckFailed(pub String);

/// The invocation itself is wrong.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Usage(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// 28×28×1 inputs, two blocks of two layers.
    Desk,
    /// 8×8×2 inputs, four 4-channel layers; searches in seconds.
    Toy,
}

#[derive(Debug, Parser)]
#[command(name = "nas", version, about = "Single-path superkernel architecture search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `search.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a starter configuration.
    InitConfig {
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Generate a synthetic latency table for the configured space.
    LutSynth(Common),
    /// Run the architecture search.
    Search {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "f64")]
        precision: Precision,
    },
    /// Derive the architecture held by a search checkpoint.
    Derive {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Materialise and retrain a derived architecture.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        derived: PathBuf,
        /// Start from the searched weights instead of a fresh initialisation.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "f64")]
        precision: Precision,
    },
    /// Compare the runtime predictor with noisy synthetic measurements.
    ValidateLatency(Common),
    /// Finite-difference check of the search objective's gradients.
    Gradcheck(Common),
    /// Search once per (λ, seed) and recommend a λ.
    SweepLambda {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "f64")]
        precision: Precision,
    },
}

fn open(name: &str, c: &Common, precision: Precision) -> Result<Run> {
    let config = RunConfig::load(&c.config, c.seed)?;
    Run::new(name, config, &c.out, precision)
}

fn execute(cli: Cli) -> Result<()> {
    let mut run;
    match &cli.command {
        Command::InitConfig { preset, seed, out } => {
            let seed = seed.unwrap_or(0);
            let mut search = match preset {
                Preset::Desk => SearchConfig::desk(seed),
                Preset::Toy => SearchConfig::toy(seed),
            };
            search.lut_path = Some("lut.json".into());
            run = Run::new("init-config", RunConfig::from_search(search), out, Precision::F64)?;
            commands::init_config(&mut run)?;
        }
        Command::LutSynth(c) => {
            run = open("lut-synth", c, Precision::F64)?;
            commands::lut_synth(&mut run)?;
        }
        Command::Search { common, precision } => {
            run = open("search", common, *precision)?;
            match precision {
                Precision::F32 => commands::search::<f32>(&mut run)?,
                Precision::F64 => commands::search::<f64>(&mut run)?,
            }
        }
        Command::Derive { common, checkpoint } => {
            run = open("derive", common, Precision::F64)?;
            commands::derive(&mut run, checkpoint)?;
        }
        Command::Train { common, derived, checkpoint, precision } => {
            run = open("train", common, *precision)?;
            let ckpt = checkpoint.as_deref();
            match precision {
                Precision::F32 => commands::train::<f32>(&mut run, derived, ckpt)?,
                Precision::F64 => commands::train::<f64>(&mut run, derived, ckpt)?,
            }
        }
        Command::ValidateLatency(c) => {
            run = open("validate-latency", c, Precision::F64)?;
            commands::validate_latency(&mut run)?;
        }
        Command::Gradcheck(c) => {
            run = open("gradcheck", c, Precision::F64)?;
            // The report is written before the verdict, so the manifest must be too.
            let verdict = commands::gradcheck(&mut run);
            run.finish()?;
            return verdict;
        }
        Command::SweepLambda { common, precision } => {
            run = open("sweep-lambda", common, *precision)?;
            match precision {
                Precision::F32 => commands::sweep_lambda::<f32>(&mut run, common.seed)?,
                Precision::F64 => commands::sweep_lambda::<f64>(&mut run, common.seed)?,
            }
        }
    }
    run.finish()
}

/// 1 for problems with the invocation or its inputs, 2 for failed checks.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return 2;
    }
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<CoreError>() {
        Some(CoreError::Io(_) | CoreError::Json(_) | CoreError::InvalidConfig(_) | CoreError::InvalidArgument(_)) => 1,
        Some(_) => 2,
        None if err.downcast_ref::<std::io::Error>().is_some() || err.downcast_ref::<serde_json::Error>().is_some() => {
            1
        }
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
