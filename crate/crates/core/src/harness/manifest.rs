use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::basepool::{MODEL_FORMAT, MODEL_VERSION};
use crate::error::{Error, Result};
use crate::metalearner::{META_FORMAT, META_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Computed,
    Cached,
    Failed,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    /// Relative to the run's output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub stages: Vec<StageRecord>,
    pub files: Vec<FileRecord>,
    pub completed: bool,
}

impl RunManifest {
    pub fn new(config_hash: String, seed: u64) -> Self {
        let versions = BTreeMap::from([
            ("feddes".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            (MODEL_FORMAT.to_string(), MODEL_VERSION.to_string()),
            (META_FORMAT.to_string(), META_VERSION.to_string()),
        ]);
        Self {
            config_hash,
            seed,
            versions,
            stages: Vec::new(),
            files: Vec::new(),
            completed: false,
        }
    }

    pub fn record(&mut self, name: &str, status: StageStatus, seconds: f64, error: Option<String>) {
        self.stages.push(StageRecord {
            name: name.to_string(),
            status,
            seconds,
            error,
        });
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// Adds `relative` (under `root`) with its checksum.
    pub fn add_file(&mut self, root: &Path, relative: &str) -> Result<()> {
        let path = root.join(relative);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.files.retain(|f| f.path != relative);
        self.files.push(FileRecord {
            path: relative.to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    /// Recomputes every listed checksum; returns the paths that no longer match.
    pub fn verify(&self, root: &Path) -> Vec<String> {
        self.files
            .iter()
            .filter(|f| match std::fs::read(root.join(&f.path)) {
                Ok(bytes) => hex::encode(Sha256::digest(&bytes)) != f.sha256,
                Err(_) => true,
            })
            .map(|f| f.path.clone())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
