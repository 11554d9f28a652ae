//! `weathergan` command line: every command reads files and flags, writes
//! its outputs and one `run_manifest.toml` under a single run directory.

pub mod cache;
pub mod evaluate;
pub mod generate;
pub mod manifest;
pub mod tools;
pub mod train;

use anyhow::Result;
use clap::{Parser, Subcommand};
use manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(name = "weathergan", version, about = "Adverse-weather image translation for detector data augmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the generator pair and critics from a TOML config.
    Train(train::TrainArgs),
    /// Translate a directory of images with a trained checkpoint.
    Generate(generate::GenerateArgs),
    /// FID, KID, mAP, Pareto and detection-statistics reports.
    #[command(subcommand)]
    Evaluate(evaluate::EvaluateCmd),
    /// Train the toy detector on labeled image directories.
    TrainDetector(tools::TrainDetectorArgs),
    /// Run a trained toy detector and write YOLO-format predictions.
    Detect(tools::DetectArgs),
    /// Write a synthetic day/dark toy dataset.
    Synth(tools::SynthArgs),
}

/// Runs one command; `argv` is recorded in the run manifest.
pub fn run(cli: Cli, argv: &[String]) -> Result<()> {
    let out = match &cli.command {
        Command::Train(a) => a.out.clone(),
        Command::Generate(a) => a.out.clone(),
        Command::Evaluate(c) => c.out(),
        Command::TrainDetector(a) => a.out.clone(),
        Command::Detect(a) => a.out.clone(),
        Command::Synth(a) => a.out.clone(),
    };
    let mut manifest = RunManifest::start(argv, &out)?;
    match cli.command {
        Command::Train(a) => train::run(&a, &mut manifest)?,
        Command::Generate(a) => generate::run(&a)?,
        Command::Evaluate(c) => evaluate::run(&c, &mut manifest)?,
        Command::TrainDetector(a) => tools::train_detector(&a, &mut manifest)?,
        Command::Detect(a) => tools::detect(&a)?,
        Command::Synth(a) => tools::synth(&a, &mut manifest)?,
    }
    manifest.finish()?;
    Ok(())
}
