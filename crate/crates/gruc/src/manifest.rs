//! Run manifests.
//!
//! Every CLI run writes a JSON sidecar recording what ran, over which inputs,
//! with which configuration and seed, and what it produced. The manifest is
//! what makes a result auditable after the fact: given the manifest and the
//! input files, the run reproduces bit for bit (wall time and timestamp
//! aside).

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Subcommand name.
    pub command: String,
    /// Full argument vector as invoked.
    pub argv: Vec<String>,
    pub config: Config,
    pub seed: u64,
    /// Worker threads used.
    pub jobs: usize,
    /// Paths read.
    pub inputs: Vec<String>,
    /// Paths written.
    pub outputs: Vec<String>,
    pub wall_seconds: f64,
    /// Seconds since the UNIX epoch at completion.
    pub created_unix: u64,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, config: Config, seed: u64, jobs: usize) -> Self {
        RunManifest {
            command: command.into(),
            argv: std::env::args().collect(),
            config,
            seed,
            jobs,
            inputs: Vec::new(),
            outputs: Vec::new(),
            wall_seconds: 0.0,
            created_unix: 0,
        }
    }

    pub fn input(&mut self, path: impl AsRef<Path>) -> &mut Self {
        self.inputs.push(path.as_ref().display().to_string());
        self
    }

    pub fn output(&mut self, path: impl AsRef<Path>) -> &mut Self {
        self.outputs.push(path.as_ref().display().to_string());
        self
    }

    /// Stamps the timestamp and writes atomically (temporary plus rename).
    pub fn save(&mut self, path: &Path) -> Result<()> {
        self.created_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: path.display().to_string(),
            source,
        })?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, text).map_err(|e| Error::io(tmp.display().to_string(), e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<RunManifest> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.display().to_string(),
            source,
        })
    }
}
