use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Written next to the outputs as `<command>.manifest.json`.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    pub seed: u64,
    pub inputs: Vec<InputDigest>,
    /// Digest over all input digests, in the order listed.
    pub input_digest: String,
    pub outputs: Vec<String>,
    /// Wall-clock seconds per named stage (only commands with stages).
    pub stage_seconds: Vec<(String, f64)>,
    pub wall_clock_seconds: f64,
}

/// Git-style object digest (`blob <len>\0` header) with SHA-256.
pub fn blob_digest(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub struct ManifestBuilder {
    command: String,
    inputs: Vec<InputDigest>,
    outputs: Vec<String>,
    stages: Vec<(String, f64)>,
    started: std::time::Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            stages: Vec::new(),
            started: std::time::Instant::now(),
        }
    }

    /// Reads an input file, recording its digest.
    pub fn read_input(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        if !path.exists() {
            return Err(CliError::MissingInput(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: blob_digest(&bytes),
        });
        Ok(bytes)
    }

    pub fn write_output(&mut self, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
        std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))?;
        self.outputs.push(path.display().to_string());
        Ok(())
    }

    pub fn stage(&mut self, name: String, seconds: f64) {
        self.stages.push((name, seconds));
    }

    /// Writes the manifest into `dir` and returns its path.
    pub fn finish(self, dir: &Path, config: &RunConfig, seed: u64) -> Result<PathBuf, CliError> {
        let mut h = Sha256::new();
        for i in &self.inputs {
            h.update(i.sha256.as_bytes());
            h.update(b"\n");
        }
        let path = dir.join(format!("{}.manifest.json", self.command));
        let manifest = RunManifest {
            command: self.command,
            config: config.clone(),
            seed,
            inputs: self.inputs,
            input_digest: hex::encode(h.finalize()),
            outputs: self.outputs,
            stage_seconds: self.stages,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        std::fs::write(&path, json + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
