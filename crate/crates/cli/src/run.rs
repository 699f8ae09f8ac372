//! Per-command run manifest: enough to replay the command and to check
//! that its inputs and outputs are the ones recorded.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use pslnet::checkpoint::file_digest;
use serde::Serialize;
use serde_json::Value;

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub tool_version: String,
    pub config: Value,
    pub seeds: Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
}

pub struct Recorder {
    command: &'static str,
    start: Instant,
    started_unix: u64,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    config: Value,
    seeds: Value,
}

fn digest(path: &Path) -> Result<FileDigest> {
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: file_digest(path).with_context(|| format!("hashing {}", path.display()))?,
    })
}

impl Recorder {
    pub fn start(command: &'static str) -> Self {
        Self {
            command,
            start: Instant::now(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            inputs: Vec::new(),
            outputs: Vec::new(),
            config: Value::Null,
            seeds: Value::Null,
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(digest(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(digest(path)?);
        Ok(())
    }

    pub fn config(&mut self, config: impl Serialize) -> Result<()> {
        self.config = serde_json::to_value(config)?;
        Ok(())
    }

    pub fn seeds(&mut self, seeds: Value) {
        self.seeds = seeds;
    }

    pub fn finish(self, path: &Path) -> Result<()> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            argv: std::env::args().collect(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.config,
            seeds: self.seeds,
            inputs: self.inputs,
            outputs: self.outputs,
            started_unix: self.started_unix,
            wall_clock_seconds: self.start.elapsed().as_secs_f64(),
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
    }
}

/// `<file>.run.json` next to a single output file.
pub fn beside(file: &Path) -> PathBuf {
    let mut name = file.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".run.json");
    file.with_file_name(name)
}
