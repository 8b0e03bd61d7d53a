use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use netinv::run::{exit_code, run_command, Command, RunConfig};

#[derive(Parser)]
#[command(name = "netinv", version, about = "Network inversion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the n-class classifier.
    TrainClassifier(RunArgs),
    /// Train a conditioned generator that inverts a classifier.
    Invert(RunArgs),
    /// Reconstruct training-like data and score it with SSIM.
    Reconstruct(RunArgs),
    /// Run the train, invert, exclude cycle with a garbage class.
    Ood(RunArgs),
    /// Accuracy matrix and threshold report for saved classifiers.
    Evaluate(RunArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Cmd::TrainClassifier(a) => (Command::TrainClassifier, a),
        Cmd::Invert(a) => (Command::Invert, a),
        Cmd::Reconstruct(a) => (Command::Reconstruct, a),
        Cmd::Ood(a) => (Command::Ood, a),
        Cmd::Evaluate(a) => (Command::Evaluate, a),
    };
    let result = RunConfig::load(&args.config).and_then(|mut cfg| {
        if let Some(seed) = args.seed {
            cfg.set("seed", seed)?;
        }
        run_command(command, &cfg, &args.out)
    });
    match &result {
        Ok(manifest) => {
            for (name, value) in &manifest.metrics {
                println!("{name} = {value}");
            }
            println!("wrote {}", args.out.display());
        }
        Err(e) => eprintln!("error: {e}"),
    }
    ExitCode::from(exit_code(&result) as u8)
}
