//! `evblur`: simulate events from sharp frames, synthesize blur, build event
//! representations and recover the sharp middle frame.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::*;
use config::{ConfigArg, FileSettings};

#[derive(Debug, Parser)]
#[command(name = "evblur", version, about = "Event-guided motion deblurring toolkit")]
struct Cli {
    #[command(flatten)]
    config: ConfigArg,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate events from a sequence of sharp frames
    Simulate(SimulateCmd),
    /// Average sharp frames into a blurry image
    Blur(BlurCmd),
    /// Build a voxel representation (SCER, SBT or Stack) from events
    Scer(ScerCmd),
    /// Derive the binary event mask from a SCER grid
    Mask(MaskCmd),
    /// Recover the sharp middle frame from a blurry image and events
    Edi(EdiCmd),
    /// Compare two images (PSNR, SSIM, reductions against a baseline)
    Eval(EvalCmd),
    /// Finite-difference check of the cross-modal attention gradients
    AttnCheck(AttnCheckCmd),
    /// Run every stage end to end and write all artifacts
    Pipeline(PipelineCmd),
    /// Render the synthetic translating-square frames
    Scene(SceneCmd),
}

pub enum Failure {
    Usage(anyhow::Error),
    Stage(&'static str, anyhow::Error),
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let file = FileSettings::load(cli.config.config.as_deref()).map_err(Failure::Usage)?;
    match &cli.command {
        Command::Simulate(cmd) => simulate(cmd, &file),
        Command::Blur(cmd) => blur(cmd),
        Command::Scer(cmd) => scer_cmd(cmd, &file),
        Command::Mask(cmd) => mask(cmd),
        Command::Edi(cmd) => edi(cmd, &file),
        Command::Eval(cmd) => eval(cmd),
        Command::AttnCheck(cmd) => attn_check(cmd),
        Command::Pipeline(cmd) => pipeline(cmd, &file),
        Command::Scene(cmd) => scene(cmd),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("EVBLUR_LOG", "warn")).init();
    // clap exits with status 2 on malformed arguments
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("evblur: usage error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Stage(stage, e)) => {
            eprintln!("evblur: stage {stage} failed: {e:#}");
            ExitCode::from(1)
        }
    }
}
