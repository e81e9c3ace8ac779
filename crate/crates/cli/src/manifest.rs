//! Run manifest written next to every command's primary output so a run can
//! be reproduced from its recorded flags.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub wall_clock_secs: f64,
    pub version: String,
}

pub struct ManifestBuilder {
    command: String,
    args: Vec<String>,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn seed(&mut self, seed: u64) -> &mut Self {
        self.seed = Some(seed);
        self
    }

    pub fn input(&mut self, path: impl AsRef<Path>) -> &mut Self {
        self.inputs.push(path.as_ref().to_path_buf());
        self
    }

    pub fn output(&mut self, path: impl AsRef<Path>) -> &mut Self {
        self.outputs.push(path.as_ref().to_path_buf());
        self
    }

    /// Writes `<primary_output>.manifest.json`.
    pub fn write_next_to(&self, primary_output: impl AsRef<Path>) -> std::io::Result<PathBuf> {
        let mut name = primary_output
            .as_ref()
            .file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_else(|| "output".to_string());
        name.push_str(".manifest.json");
        let path = primary_output
            .as_ref()
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(name);
        let manifest = RunManifest {
            command: self.command.clone(),
            args: self.args.clone(),
            seed: self.seed,
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        };
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(path)
    }
}
