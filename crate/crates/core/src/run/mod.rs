//! Reproducible experiment runs: one config, one output directory, one manifest.

mod commands;
pub mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use config::{RunConfig, Settings, KEYS};

pub const MANIFEST_VERSION: u32 = 1;
pub const RESOLVED_CONFIG: &str = "config.resolved";
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    TrainClassifier,
    Invert,
    Reconstruct,
    Ood,
    Evaluate,
}

impl Command {
    pub const ALL: [Command; 5] = [
        Command::TrainClassifier,
        Command::Invert,
        Command::Reconstruct,
        Command::Ood,
        Command::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::TrainClassifier => "train-classifier",
            Command::Invert => "invert",
            Command::Reconstruct => "reconstruct",
            Command::Ood => "ood",
            Command::Evaluate => "evaluate",
        }
    }

    pub fn parse(s: &str) -> Option<Command> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseTime {
    pub phase: String,
    pub seconds: f64,
}

/// Record of one run: resolved config, artifact hashes, timings, headline metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub command: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    /// File name (relative to the run directory) to lowercase hex SHA-256.
    pub artifacts: BTreeMap<String, String>,
    pub phases: Vec<PhaseTime>,
    pub metrics: BTreeMap<String, f64>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            context: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    /// Names of artifacts whose current contents no longer match the recorded hash.
    pub fn stale_artifacts(&self, dir: impl AsRef<Path>) -> Result<Vec<String>> {
        let mut stale = Vec::new();
        for (name, hash) in &self.artifacts {
            if &sha256_file(&dir.as_ref().join(name))? != hash {
                stale.push(name.clone());
            }
        }
        Ok(stale)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Bookkeeping shared by every command.
pub(crate) struct Run {
    dir: PathBuf,
    artifacts: BTreeMap<String, String>,
    phases: Vec<PhaseTime>,
    metrics: BTreeMap<String, f64>,
    mark: Instant,
}

impl Run {
    fn new(dir: &Path) -> Result<Run> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Run {
            dir: dir.to_owned(),
            artifacts: BTreeMap::new(),
            phases: Vec::new(),
            metrics: BTreeMap::new(),
            mark: Instant::now(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Hash a file already written into the run directory.
    pub fn artifact(&mut self, name: &str) -> Result<()> {
        let hash = sha256_file(&self.path(name))?;
        self.artifacts.insert(name.to_owned(), hash);
        Ok(())
    }

    /// Close the current phase, charging it the time since the previous mark.
    pub fn phase(&mut self, name: &str) {
        let now = Instant::now();
        self.phases.push(PhaseTime {
            phase: name.to_owned(),
            seconds: (now - self.mark).as_secs_f64(),
        });
        self.mark = now;
    }

    /// Non-finite values are left out so the manifest stays valid JSON.
    pub fn metric(&mut self, name: &str, value: f64) {
        if value.is_finite() {
            self.metrics.insert(name.to_owned(), value);
        }
    }
}

/// Execute `command` with `cfg`, writing every artifact plus the resolved
/// config and a manifest into `out`.
pub fn run_command(command: Command, cfg: &RunConfig, out: impl AsRef<Path>) -> Result<Manifest> {
    let settings = Settings::from_config(cfg)?;
    let mut run = Run::new(out.as_ref())?;
    let resolved = run.path(RESOLVED_CONFIG);
    std::fs::write(&resolved, cfg.render()).map_err(|e| Error::io(&resolved, e))?;
    run.artifact(RESOLVED_CONFIG)?;
    match command {
        Command::TrainClassifier => commands::train_classifier(&settings, &mut run)?,
        Command::Invert => commands::invert(&settings, &mut run)?,
        Command::Reconstruct => commands::reconstruct(&settings, &mut run)?,
        Command::Ood => commands::ood(&settings, &mut run)?,
        Command::Evaluate => commands::evaluate(&settings, &mut run)?,
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        command: command.name().to_owned(),
        seed: settings.seed,
        config: cfg.entries().clone(),
        artifacts: run.artifacts,
        phases: run.phases,
        metrics: run.metrics,
    };
    let path = run.dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Process exit status for a run result: 0 success, 2 configuration error,
/// 3 divergence, 1 anything else.
pub fn exit_code(result: &Result<Manifest>) -> i32 {
    match result {
        Ok(_) => 0,
        Err(Error::Config(_)) => 2,
        Err(Error::Divergence(_)) => 3,
        Err(_) => 1,
    }
}
