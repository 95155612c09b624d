//! `manifest.json`: config hash, seeds and file checksums of an artifact
//! directory.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub kind: String,
    pub config_hash: String,
    pub dataset_fingerprint: String,
    pub seeds: BTreeMap<String, u64>,
    /// Shadow model indices whose artifacts are complete.
    #[serde(default)]
    pub completed_models: Vec<usize>,
    /// Relative path to sha256 hex digest.
    #[serde(default)]
    pub files: BTreeMap<String, String>,
    /// Wall-clock fields; excluded from determinism checks.
    pub created_unix: u64,
    pub updated_unix: u64,
}

impl Manifest {
    pub fn new(kind: &str, config_hash: String, dataset_fingerprint: String) -> Self {
        let now = unix_now();
        Self {
            tool: "demem-lab".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            kind: kind.into(),
            config_hash,
            dataset_fingerprint,
            seeds: BTreeMap::new(),
            completed_models: Vec::new(),
            files: BTreeMap::new(),
            created_unix: now,
            updated_unix: now,
        }
    }

    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn require(dir: &Path) -> Result<Self> {
        Self::load(dir)?.ok_or_else(|| {
            Error::io(
                dir.join(MANIFEST_FILE),
                std::io::Error::new(std::io::ErrorKind::NotFound, "missing manifest; run `shadow` first"),
            )
        })
    }

    /// Writes atomically (temp file, then rename).
    pub fn save(&mut self, dir: &Path) -> Result<()> {
        self.updated_unix = unix_now();
        let text = serde_json::to_string_pretty(self)?;
        write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
    }

    /// Records the current checksum of `dir/rel`.
    pub fn record_file(&mut self, dir: &Path, rel: &str) -> Result<()> {
        self.files.insert(rel.to_string(), file_sha256(&dir.join(rel))?);
        Ok(())
    }

    /// Fails with a conflict if `dir/rel` no longer matches its recorded
    /// checksum, or with a file error if it is missing.
    pub fn verify_file(&self, dir: &Path, rel: &str) -> Result<()> {
        let expected = self
            .files
            .get(rel)
            .ok_or_else(|| Error::Conflict(format!("{rel} is not listed in the manifest")))?;
        let actual = file_sha256(&dir.join(rel))?;
        if &actual != expected {
            return Err(Error::Conflict(format!(
                "{rel}: checksum {actual} does not match manifest {expected}"
            )));
        }
        Ok(())
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}
