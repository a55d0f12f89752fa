//! Content hashing and run-manifest records used for stage caching.
//!
//! Artifacts are keyed by SHA-256 of their bytes, never by timestamps, so a
//! rerun with unchanged inputs is a verifiable no-op.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub fn hash_bytes(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex_digest(h)
}

pub fn hash_file(path: &Path) -> std::io::Result<String> {
    let mut f = std::fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex_digest(h))
}

/// Hash of a serializable value via its canonical JSON encoding.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    hash_bytes(serde_json::to_string(value).expect("serializable").as_bytes())
}

fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-stage provenance record, written atomically at stage boundaries. A
/// completed manifest carries every hash needed to verify reproducibility.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub tool_version: String,
    pub config_hash: String,
    /// input artifact path -> content hash
    pub inputs: BTreeMap<String, String>,
    /// output artifact path -> content hash
    pub outputs: BTreeMap<String, String>,
    pub thread_count: usize,
    pub wall_clock_secs: f64,
    pub status: String,
}

impl RunManifest {
    pub fn new(stage: &str, config_hash: String) -> RunManifest {
        RunManifest {
            stage: stage.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            thread_count: rayon::current_num_threads(),
            wall_clock_secs: 0.0,
            status: "running".to_string(),
        }
    }

    /// Write via a temp file and atomic rename.
    pub fn write_atomic(&self, path: &Path) -> std::io::Result<()> {
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> std::io::Result<RunManifest> {
        let data = std::fs::read_to_string(path)?;
        serde_json::from_str(&data).map_err(std::io::Error::other)
    }
}
