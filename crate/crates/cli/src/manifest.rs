// SPDX-License-Identifier: MIT OR Apache-2.0

//! `manifest.json`: everything needed to rerun a command.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use headprobe::{traceio, Error, Result};

#[derive(Debug, Serialize)]
struct FileEntry {
    path: PathBuf,
    sha256: String,
}

fn sha256_of(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

pub struct Manifest {
    command: &'static str,
    config: Value,
    seeds: Value,
    jobs: usize,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    notes: Vec<String>,
}

impl Manifest {
    /// `config` is the fully resolved configuration (after defaults and
    /// config-file values are applied).
    pub fn new(command: &'static str, config: Value, seeds: Value, jobs: usize) -> Self {
        Self {
            command,
            config,
            seeds,
            jobs,
            inputs: Vec::new(),
            outputs: Vec::new(),
            notes: Vec::new(),
        }
    }

    /// For commands whose resolved config depends on loaded inputs.
    pub fn set_config(&mut self, config: Value) {
        self.config = config;
    }

    pub fn set_seeds(&mut self, seeds: Value) {
        self.seeds = seeds;
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn note(&mut self, note: impl Into<String>) {
        self.notes.push(note.into());
    }

    /// Writes `bytes` atomically to `dir/name` and records it.
    pub fn write(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = dir.join(name);
        traceio::write_atomic(&path, bytes)?;
        self.outputs.push(path.clone());
        Ok(path)
    }

    pub fn finish(self, dir: &Path) -> Result<()> {
        let hash = |paths: &[PathBuf]| -> Result<Vec<FileEntry>> {
            paths
                .iter()
                .map(|p| {
                    Ok(FileEntry {
                        path: p.clone(),
                        sha256: sha256_of(p)?,
                    })
                })
                .collect()
        };
        let doc = json!({
            "tool": "headprobe",
            "version": env!("CARGO_PKG_VERSION"),
            "formats": {
                "dump": traceio::DUMP_VERSION,
                "bank": traceio::BANK_VERSION,
                "model": traceio::MODEL_VERSION,
            },
            "command": self.command,
            "argv": std::env::args().collect::<Vec<_>>(),
            "config": self.config,
            "seeds": self.seeds,
            "jobs": self.jobs,
            "inputs": hash(&self.inputs)?,
            "outputs": hash(&self.outputs)?,
            "notes": self.notes,
        });
        let mut text =
            serde_json::to_string_pretty(&doc).map_err(|e| Error::Format(e.to_string()))?;
        text.push('\n');
        traceio::write_atomic(&dir.join("manifest.json"), text.as_bytes())
    }
}
