use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Record of one CLI run: enough to rerun it and get the same artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub seed: u64,
    /// Effective configuration after defaults, config file and flags.
    pub config: Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Headline results of the run.
    pub summary: Value,
    pub parallel: String,
    pub wall_secs: f64,
}

impl RunManifest {
    pub fn new(subcommand: &str, seed: u64, config: Value) -> Self {
        Self {
            subcommand: subcommand.to_owned(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            summary: Value::Null,
            parallel: steer_core::parallel_mode().to_owned(),
            wall_secs: 0.0,
        }
    }

    pub fn finish(&mut self, started: Instant) {
        self.wall_secs = started.elapsed().as_secs_f64();
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).with_context(|| format!("writing manifest {}", path.display()))
    }
}

/// Where the manifest for an output goes: inside it for a directory, next to
/// it (`<file>.manifest.json`) for a file.
pub fn manifest_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("run_manifest.json")
    } else {
        let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        out.with_file_name(name)
    }
}
