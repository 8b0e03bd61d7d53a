//! Drive the experiment runner from code: train two garbage-class
//! classifiers with the OOD cycle, then evaluate them against each other's
//! data and Gaussian noise.

use std::path::PathBuf;

use netinv::run::{run_command, Command, RunConfig};

fn main() -> netinv::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "runs".into()));
    let mut models = Vec::new();
    for family in ["bars", "rings"] {
        let mut cfg = RunConfig::defaults();
        cfg.set("dataset.family", family)?;
        cfg.set("ood.cycles", 2)?;
        let dir = out.join(family);
        let manifest = run_command(Command::Ood, &cfg, &dir)?;
        println!("{family}: {:?}", manifest.metrics);
        models.push(dir.join("classifier.ninv").display().to_string());
    }

    let mut cfg = RunConfig::defaults();
    cfg.set("evaluate.models", models.join(","))?;
    cfg.set("evaluate.datasets", "bars,rings,noise")?;
    let manifest = run_command(Command::Evaluate, &cfg, out.join("evaluate"))?;
    for (cell, value) in &manifest.metrics {
        println!("{cell} = {value:.3}");
    }
    println!("artifacts {:?}", manifest.artifacts.keys().collect::<Vec<_>>());
    Ok(())
}
