use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use anyhow::Context;
use serde::Serialize;
use serde_json::Value;

/// Provenance record written next to every artifact.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    /// Fully resolved settings after flags, config file and defaults.
    pub config: Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub wall_time_s: f64,
}

static STARTED: OnceLock<Instant> = OnceLock::new();

/// Marks the start of the run; manifests report wall time from here.
pub fn mark_start() {
    STARTED.get_or_init(Instant::now);
}

pub struct ManifestBuilder {
    command: String,
    seed: Option<u64>,
    config: Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    start: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, seed: Option<u64>, config: Value) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            start: *STARTED.get_or_init(Instant::now),
        }
    }

    pub fn input(&mut self, p: impl AsRef<Path>) {
        self.inputs.push(p.as_ref().to_path_buf());
    }

    pub fn output(&mut self, p: impl AsRef<Path>) {
        self.outputs.push(p.as_ref().to_path_buf());
    }

    /// Writes the manifest to `path` and returns it.
    pub fn finish(self, path: &Path) -> anyhow::Result<RunManifest> {
        let m = RunManifest {
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.seed,
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
            wall_time_s: self.start.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&m)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing manifest {}", path.display()))?;
        Ok(m)
    }
}

/// `out.log` -> `out.log.manifest.json`.
pub fn manifest_path_for(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}
