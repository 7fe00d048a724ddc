//! Run manifests: the effective configuration plus run metadata, written
//! next to every run's artifacts. A manifest is itself a valid config
//! file, so `--config <manifest>` replays the run and reproduces its
//! metrics byte for byte (timestamps live only in the manifest).

use anyhow::{Context, Result};
use mstrans::config::ConfigDoc;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

pub const RUN_KEYS: &[&str] =
    &["command", "version", "seed", "started_unix", "finished_unix", "outputs"];

pub struct ManifestBuilder {
    doc: ConfigDoc,
    command: String,
    seed: String,
    started: u64,
    outputs: Vec<PathBuf>,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl ManifestBuilder {
    /// `config` is the fully resolved configuration the run will use.
    pub fn new(command: &str, seed: String, config: ConfigDoc) -> Self {
        ManifestBuilder {
            doc: config,
            command: command.to_string(),
            seed,
            started: now_unix(),
            outputs: Vec::new(),
        }
    }

    pub fn add_output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Writes `manifest.txt` into `dir`, listing every produced artifact.
    pub fn finish(mut self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.txt");
        self.doc.set("run", "command", &self.command);
        self.doc.set("run", "version", env!("CARGO_PKG_VERSION"));
        self.doc.set("run", "seed", &self.seed);
        self.doc.set("run", "started_unix", &self.started.to_string());
        self.doc.set("run", "finished_unix", &now_unix().to_string());
        let outputs: Vec<String> = self
            .outputs
            .iter()
            .map(|p| {
                p.file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| p.display().to_string())
            })
            .collect();
        self.doc.set("run", "outputs", &outputs.join(","));
        std::fs::write(&path, self.doc.to_text())
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// Ensures the output directory exists.
pub fn prepare_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Writes a text artifact and registers it with the manifest.
pub fn write_artifact(
    builder: &mut ManifestBuilder,
    dir: &Path,
    name: &str,
    content: &str,
) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, content).with_context(|| format!("writing {}", path.display()))?;
    builder.add_output(&path);
    Ok(path)
}
