//! Run manifests: which files a command wrote, under which config.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use relufair::model::{sha256_hex, write_atomic};
use relufair::{Error, Result};
use serde::{Deserialize, Serialize};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub verb: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub artifacts: Vec<Artifact>,
    /// Seconds since the Unix epoch.
    pub started_at: u64,
    pub finished_at: u64,
    /// SHA-256 over every field above except the two timestamps.
    pub manifest_hash: String,
}

pub fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn compute_hash(&self) -> String {
        let mut canon = self.clone();
        canon.started_at = 0;
        canon.finished_at = 0;
        canon.manifest_hash.clear();
        sha256_hex(&serde_json::to_vec(&canon).expect("manifest serialises"))
    }

    pub fn path(out: &Path, verb: &str) -> PathBuf {
        out.join(format!("manifest.{verb}.json"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Paths of artifacts that no longer exist under `out`.
    pub fn missing(&self, out: &Path) -> Vec<String> {
        self.artifacts
            .iter()
            .filter(|a| !out.join(&a.path).is_file())
            .map(|a| a.path.clone())
            .collect()
    }
}

/// Hash every written file, check that it exists, and write
/// `manifest.<verb>.json` into `out`.
pub fn finalize(out: &Path, verb: &str, config_hash: String, seeds: Vec<u64>, written: &[PathBuf], started_at: u64) -> Result<PathBuf> {
    let mut artifacts = Vec::with_capacity(written.len());
    for path in written {
        let bytes = std::fs::read(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        let rel = path.strip_prefix(out).unwrap_or(path);
        let rel: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
        artifacts.push(Artifact {
            path: rel.join("/"),
            sha256: sha256_hex(&bytes),
        });
    }
    artifacts.sort();
    artifacts.dedup();
    let mut m = RunManifest {
        tool: "relufair".into(),
        tool_version: TOOL_VERSION.into(),
        verb: verb.into(),
        config_hash,
        seeds,
        artifacts,
        started_at,
        finished_at: now(),
        manifest_hash: String::new(),
    };
    m.manifest_hash = m.compute_hash();
    if let Some(p) = m.missing(out).first() {
        return Err(Error::Io {
            path: out.join(p),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "artifact vanished before the manifest was written"),
        });
    }
    let path = RunManifest::path(out, verb);
    let text = serde_json::to_string_pretty(&m).expect("manifest serialises");
    write_atomic(&path, text.as_bytes())?;
    Ok(path)
}
