//! Run manifests: which config produced which output bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub workers: usize,
    pub wall_time_s: f64,
    /// Output file name to SHA-256 of its bytes.
    pub files: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self, String> {
        let path = dir.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Reads `file` and checks it against the manifest next to it.
    pub fn verified(file: &Path) -> Result<(Self, Vec<u8>), String> {
        let dir = file.parent().unwrap_or(Path::new("."));
        let manifest = Self::read(dir)?;
        let bytes = std::fs::read(file).map_err(|e| format!("{}: {e}", file.display()))?;
        let name = file.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        match manifest.files.get(name) {
            Some(h) if *h == sha256_hex(&bytes) => Ok((manifest, bytes)),
            Some(_) => Err(format!("manifest mismatch: {name} was modified after the run")),
            None => Err(format!("manifest mismatch: {name} is not listed in {}", dir.join(MANIFEST_NAME).display())),
        }
    }
}
