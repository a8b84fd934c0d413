//! Reproducibility envelope attached to every emitted report: the exact
//! configuration, seeds, tool version, input digests, and a timestamp.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub created: String,
    pub command: String,
    pub seed: u64,
    pub jobs: usize,
    pub cutoff: f64,
    pub penalty_factor: f64,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
}

impl RunManifest {
    pub fn new(
        command: &str,
        seed: u64,
        jobs: usize,
        cutoff: f64,
        penalty_factor: f64,
        config: serde_json::Value,
    ) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            created: chrono::Utc::now().to_rfc3339(),
            command: command.to_string(),
            seed,
            jobs,
            cutoff,
            penalty_factor,
            config,
            inputs: Vec::new(),
        }
    }

    pub fn add_file(&mut self, path: &Path) -> std::io::Result<()> {
        let bytes = std::fs::read(path)?;
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: hex_digest(&bytes),
        });
        Ok(())
    }

    /// Digest of a directory: the SHA-256 over (name, content digest) of
    /// every regular file, in sorted name order.
    pub fn add_dir(&mut self, path: &Path) -> std::io::Result<()> {
        let mut entries: Vec<(String, Vec<u8>)> = Vec::new();
        for entry in std::fs::read_dir(path)? {
            let entry = entry?;
            if entry.file_type()?.is_file() {
                entries.push((
                    entry.file_name().to_string_lossy().into_owned(),
                    std::fs::read(entry.path())?,
                ));
            }
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let mut hasher = Sha256::new();
        for (name, bytes) in entries {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            hasher.update(Sha256::digest(&bytes));
        }
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: to_hex(&hasher.finalize()),
        });
        Ok(())
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    to_hex(&Sha256::digest(bytes))
}

fn to_hex(digest: &[u8]) -> String {
    let mut out = String::with_capacity(digest.len() * 2);
    for byte in digest {
        let _ = write!(out, "{byte:02x}");
    }
    out
}
