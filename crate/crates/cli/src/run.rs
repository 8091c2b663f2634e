use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use trajocc::error::{Error, Result};
use trajocc::trainer::write_atomic;

/// Record of one command invocation, written at start and finalized at exit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// Fully resolved configuration, TOML.
    pub config: String,
    pub seed: u64,
    pub code_version: String,
    /// Seconds since the Unix epoch.
    pub started: f64,
    pub finished: Option<f64>,
    /// `running`, `ok` or the error message.
    pub status: String,
    pub artifacts: Vec<PathBuf>,
}

pub const RUN_FILE: &str = "run.json";

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

impl RunManifest {
    pub fn start(command: &str, config: String, seed: u64, dir: &Path) -> Result<Self> {
        let m = Self {
            command: command.to_string(),
            args: std::env::args().collect(),
            config,
            seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started: now(),
            finished: None,
            status: "running".into(),
            artifacts: Vec::new(),
        };
        m.write(dir)?;
        Ok(m)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let text = serde_json::to_vec_pretty(self).expect("manifest serializes");
        write_atomic(&dir.join(RUN_FILE), &text)
    }

    pub fn finish<T>(mut self, dir: &Path, outcome: &Result<T>) -> Result<()> {
        self.finished = Some(now());
        self.status = match outcome {
            Ok(_) => "ok".into(),
            Err(e) => e.to_string(),
        };
        self.write(dir)
    }
}
