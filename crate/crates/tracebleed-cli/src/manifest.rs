//! Run manifest: per-stage input/output digests, seeds, and timings, keyed
//! by the config hash. Artifacts themselves never contain wall-clock data,
//! so reruns with unchanged inputs reproduce them bit-exactly; the manifest
//! is the one place timing lives.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StageEntry {
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub seed: u64,
    pub wall_s: f64,
    pub completed_unix: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub config_canonical: String,
    pub stages: BTreeMap<String, StageEntry>,
}

impl RunManifest {
    pub fn new(config_hash: &str, config_canonical: &str) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash.to_string(),
            config_canonical: config_canonical.to_string(),
            stages: BTreeMap::new(),
        }
    }

    pub fn path(run_dir: &Path) -> PathBuf {
        run_dir.join("manifest.json")
    }

    pub fn load_or_new(run_dir: &Path, config_hash: &str, canonical: &str) -> CliResult<Self> {
        let path = Self::path(run_dir);
        if path.exists() {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| CliError::Runtime(format!("reading {path:?}: {e}")))?;
            let manifest: RunManifest = serde_json::from_str(&text)
                .map_err(|e| CliError::Runtime(format!("parsing {path:?}: {e}")))?;
            if manifest.config_hash != config_hash {
                return Err(CliError::Validation(format!(
                    "run directory {run_dir:?} belongs to config {}, not {config_hash}",
                    manifest.config_hash
                )));
            }
            Ok(manifest)
        } else {
            Ok(RunManifest::new(config_hash, canonical))
        }
    }

    pub fn save(&self, run_dir: &Path) -> CliResult<()> {
        let path = Self::path(run_dir);
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| CliError::Runtime(format!("{path:?}: {e}")))?;
        Ok(())
    }

    pub fn record_stage(&mut self, name: &str, entry: StageEntry) {
        self.stages.insert(name.to_string(), entry);
    }
}

/// SHA-256 of a file, hex-encoded.
pub fn file_digest(path: &Path) -> CliResult<String> {
    let data =
        std::fs::read(path).map_err(|e| CliError::Runtime(format!("digest {path:?}: {e}")))?;
    Ok(hex::encode(Sha256::digest(&data)))
}

/// Digest of every regular file under a directory, order-stable.
pub fn dir_digest(path: &Path) -> CliResult<String> {
    let mut hasher = Sha256::new();
    let mut files: Vec<PathBuf> = Vec::new();
    collect_files(path, &mut files)?;
    files.sort();
    for f in files {
        let rel = f.strip_prefix(path).unwrap_or(&f);
        hasher.update(rel.to_string_lossy().as_bytes());
        let data =
            std::fs::read(&f).map_err(|e| CliError::Runtime(format!("digest {f:?}: {e}")))?;
        hasher.update(&data);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    let entries =
        std::fs::read_dir(dir).map_err(|e| CliError::Runtime(format!("list {dir:?}: {e}")))?;
    for entry in entries {
        let entry = entry.map_err(|e| CliError::Runtime(e.to_string()))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Digest of a path that may be a file or a directory.
pub fn artifact_digest(path: &Path) -> CliResult<String> {
    if path.is_dir() {
        dir_digest(path)
    } else {
        file_digest(path)
    }
}
