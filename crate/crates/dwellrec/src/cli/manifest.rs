//! Run manifests: every subcommand leaves behind a JSON record of what it
//! ran with — command name, seed, the full resolved configuration, content
//! digests of its inputs, and the paths it wrote. The manifest is the one
//! artifact that is allowed to differ between reruns (it carries wall-clock
//! time); everything else a run produces is byte-stable for a fixed seed.

use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::config::AppConfig;
use crate::error::{Error, Result};

/// SHA-256 of a file's contents, as lowercase hex.
pub fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: Option<u64>,
    pub config: AppConfig,
    /// Input path -> SHA-256 of its contents at read time.
    pub inputs: BTreeMap<String, String>,
    /// Files this run wrote, in creation order.
    pub outputs: Vec<String>,
    pub wall_clock_s: f64,
    pub version: String,
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>, config: &AppConfig) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            seed,
            config: config.clone(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            wall_clock_s: 0.0,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    /// Record an input file by digesting its current contents.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs
            .insert(path.display().to_string(), sha256_hex(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Stamp the elapsed time and write `<command>_manifest.json` into
    /// `out_dir`, returning the manifest's path.
    pub fn write(mut self, out_dir: &Path, started: Instant) -> Result<PathBuf> {
        self.wall_clock_s = started.elapsed().as_secs_f64();
        let name = format!("{}_manifest.json", self.command.replace('-', "_"));
        let path = out_dir.join(name);
        let text = serde_json::to_string_pretty(&self)?;
        std::fs::write(&path, text + "\n")?;
        Ok(path)
    }
}
