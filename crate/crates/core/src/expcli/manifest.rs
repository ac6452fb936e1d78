//! Run manifest: which steps ran under which config, and what they wrote.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Content id in git's object style: blobs hash `blob <len>\0<bytes>`,
/// directories hash their sorted `<name> <id>` listing as a tree.
pub fn artifact_id(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut entries: Vec<_> = fs::read_dir(path)?.collect::<std::io::Result<Vec<_>>>()?;
        entries.sort_by_key(|e| e.file_name());
        let mut listing = String::new();
        for e in entries {
            listing.push_str(&format!("{} {}\n", e.file_name().to_string_lossy(), artifact_id(&e.path())?));
        }
        Ok(object_id("tree", listing.as_bytes()))
    } else {
        Ok(object_id("blob", &fs::read(path)?))
    }
}

fn object_id(kind: &str, bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("{kind} {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: PathBuf,
    pub id: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub config_hash: String,
    pub started_at: u64,
    pub finished_at: u64,
    pub artifacts: Vec<Artifact>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Hash of the config of the most recent step.
    pub config_hash: String,
    pub steps: BTreeMap<String, StepRecord>,
}

impl RunManifest {
    pub fn load(out: &Path) -> Result<Self> {
        let p = out.join(MANIFEST_FILE);
        if !p.exists() {
            return Ok(Self::default());
        }
        Ok(serde_json::from_str(&fs::read_to_string(p)?)?)
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        fs::create_dir_all(out)?;
        fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// True when `step` already ran under `config_hash` and its artifacts are intact.
    pub fn is_complete(&self, out: &Path, step: &str, config_hash: &str) -> bool {
        self.steps.get(step).is_some_and(|s| {
            s.config_hash == config_hash
                && s.artifacts.iter().all(|a| {
                    let p = out.join(&a.path);
                    p.exists() && artifact_id(&p).is_ok_and(|id| id == a.id)
                })
        })
    }

    pub fn record(&mut self, out: &Path, step: &str, config_hash: &str, started_at: u64, paths: &[PathBuf]) -> Result<()> {
        let artifacts = paths
            .iter()
            .map(|p| {
                Ok(Artifact {
                    path: p.strip_prefix(out).unwrap_or(p).to_path_buf(),
                    id: artifact_id(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.config_hash = config_hash.to_string();
        self.steps.insert(
            step.to_string(),
            StepRecord {
                config_hash: config_hash.to_string(),
                started_at,
                finished_at: unix_now(),
                artifacts,
            },
        );
        Ok(())
    }
}
