//! Artifact staging, atomic writes and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::HarnessError;

pub const MANIFEST: &str = "manifest.json";

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Files produced by a run, held in memory until every one of them exists.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Artifacts {
    files: BTreeMap<String, Vec<u8>>,
}

impl Artifacts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.insert(name.into(), bytes);
    }

    pub fn add_text(&mut self, name: impl Into<String>, text: String) {
        self.add(name, text.into_bytes());
    }

    pub fn add_json<T: Serialize>(&mut self, name: impl Into<String>, value: &T) -> Result<(), HarnessError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.add_text(name, text);
        Ok(())
    }

    /// Serializes `rows` as CSV with a header from the first row's fields.
    pub fn add_csv<T: Serialize>(&mut self, name: impl Into<String>, rows: &[T]) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| HarnessError::Io(e.into_error()))?;
        self.add(name, bytes);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files.get(name).map(Vec::as_slice)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.files.keys().map(String::as_str)
    }

    /// Writes every file and then the manifest into `dir`.
    pub fn commit(&self, dir: &Path, cfg: &ExperimentConfig, command: &str) -> Result<Vec<PathBuf>, HarnessError> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for (name, bytes) in &self.files {
            written.push(write_atomic(&dir.join(name), bytes)?);
        }
        let manifest = Manifest {
            command: command.to_string(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            versions: BTreeMap::from([
                ("topo-nav".to_string(), env!("CARGO_PKG_VERSION").to_string()),
                ("topo-nav-core".to_string(), topo_nav_core::VERSION.to_string()),
            ]),
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            files: self.files.iter().map(|(k, v)| (k.clone(), sha256_hex(v))).collect(),
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        written.push(write_atomic(&dir.join(MANIFEST), text.as_bytes())?);
        Ok(written)
    }
}

#[derive(Debug, Serialize)]
struct Manifest {
    command: String,
    config_hash: String,
    seed: u64,
    versions: BTreeMap<String, String>,
    created_unix: u64,
    /// SHA-256 of every artifact.
    files: BTreeMap<String, String>,
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<PathBuf, HarnessError> {
    let name = path
        .file_name()
        .ok_or_else(|| HarnessError::Invalid(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes)?;
    if let Err(e) = fs::rename(&tmp, path) {
        let _ = fs::remove_file(&tmp);
        return Err(e.into());
    }
    Ok(path.to_path_buf())
}
