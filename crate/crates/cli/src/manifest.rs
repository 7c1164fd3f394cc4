//! Per-run manifest written into every run directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const FILE: &str = "run_manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Full argument vector, program name excluded.
    pub args: Vec<String>,
    pub config: Option<RunConfig>,
    pub seed: Option<u64>,
    pub artifacts: Vec<PathBuf>,
    pub version: String,
    pub started: DateTime<Utc>,
    pub finished: Option<DateTime<Utc>>,
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            config: None,
            seed: None,
            artifacts: Vec::new(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            started: Utc::now(),
            finished: None,
        }
    }

    /// Stamps the end time and writes `run_manifest.json` atomically.
    pub fn finish(mut self, dir: &Path) -> Result<PathBuf> {
        self.finished = Some(Utc::now());
        fs::create_dir_all(dir)?;
        let path = dir.join(FILE);
        let tmp = dir.join(format!("{FILE}.tmp"));
        fs::write(&tmp, serde_json::to_vec_pretty(&self)?)?;
        fs::rename(&tmp, &path)?;
        Ok(path)
    }
}
