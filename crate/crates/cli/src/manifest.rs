use crate::error::CliError;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};
use walkdir::WalkDir;

pub const MANIFEST_NAME: &str = "run.json";

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    /// SHA-256 over every input file, see [`hash_inputs`].
    pub input_hash: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

pub fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis())
}

/// Hashes each input in order. Directories contribute their files sorted by
/// relative path; every file contributes its path, length and bytes, so the
/// digest depends only on content and layout.
pub fn hash_inputs(inputs: &[PathBuf]) -> Result<String, CliError> {
    let mut h = Sha256::new();
    for root in inputs {
        let files: Vec<PathBuf> = if root.is_dir() {
            let mut v = Vec::new();
            for entry in WalkDir::new(root).sort_by_file_name() {
                let entry = entry.map_err(|e| CliError::io(root, e))?;
                let is_manifest = entry.file_name() == MANIFEST_NAME;
                if entry.file_type().is_file() && !is_manifest {
                    v.push(entry.into_path());
                }
            }
            v
        } else {
            vec![root.clone()]
        };
        for f in files {
            let bytes = std::fs::read(&f).map_err(|e| CliError::io(&f, e))?;
            let rel = f
                .strip_prefix(root)
                .unwrap_or(&f)
                .to_string_lossy()
                .replace('\\', "/");
            h.update((rel.len() as u64).to_le_bytes());
            h.update(rel.as_bytes());
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
    }
    Ok(format!("sha256:{:x}", h.finalize()))
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        std::fs::write(path, text).map_err(|e| CliError::io(path, e))
    }
}
