use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance record written next to every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_sha256: String,
    pub seed: Option<u64>,
    pub created: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub wall_time_s: f64,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config_sha256: String, seed: Option<u64>) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_sha256,
            seed,
            created: chrono::Utc::now().to_rfc3339(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            wall_time_s: 0.0,
            notes: BTreeMap::new(),
        }
    }

    pub fn inputs(mut self, v: impl IntoIterator<Item = String>) -> Self {
        self.inputs.extend(v);
        self
    }

    pub fn outputs(mut self, v: impl IntoIterator<Item = String>) -> Self {
        self.outputs.extend(v);
        self
    }

    pub fn note(mut self, key: &str, value: String) -> Self {
        self.notes.insert(key.into(), value);
        self
    }

    pub fn finish(mut self, started: Instant) -> Self {
        self.wall_time_s = started.elapsed().as_secs_f64();
        self
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Runtime(e.to_string()))?;
        fs::write(&path, text + "\n")
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
    }

    pub fn read(dir: &Path) -> CliResult<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }
}
