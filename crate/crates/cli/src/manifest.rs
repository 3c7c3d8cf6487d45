//! Per-stage provenance records and the up-to-date check built on them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Written last into every stage directory. Paths are relative to the run's
/// work directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    /// Hash of the config fields the stage reads.
    pub config_hash: String,
    pub seed: u64,
    pub input_hashes: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_time_s: f64,
}

impl Manifest {
    pub fn path(stage_dir: &Path) -> PathBuf {
        stage_dir.join(MANIFEST_FILE)
    }

    pub fn read(stage_dir: &Path) -> Result<Option<Manifest>, CliError> {
        let path = Self::path(stage_dir);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::runtime(&path.display().to_string(), e))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| CliError::runtime(&format!("corrupt manifest {}", path.display()), e))
    }

    pub fn write(&self, stage_dir: &Path) -> Result<(), CliError> {
        let path = Self::path(stage_dir);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        std::fs::write(&path, text).map_err(|e| CliError::runtime(&path.display().to_string(), e))
    }

    /// Files listed in `outputs` whose current content no longer matches.
    pub fn changed_outputs(&self, workdir: &Path) -> Vec<String> {
        self.outputs
            .iter()
            .filter(|(rel, want)| {
                hash_file(&workdir.join(rel)).ok().as_deref() != Some(want.as_str())
            })
            .map(|(rel, _)| rel.clone())
            .collect()
    }
}

pub fn hash_file(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hashes every regular file under `dir` except the manifest, keyed by path
/// relative to `workdir` with `/` separators.
pub fn hash_tree(workdir: &Path, dir: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries =
            std::fs::read_dir(&d).map_err(|e| CliError::runtime(&d.display().to_string(), e))?;
        for entry in entries {
            let path = entry
                .map_err(|e| CliError::runtime(&d.display().to_string(), e))?
                .path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != MANIFEST_FILE) {
                let rel = path.strip_prefix(workdir).unwrap_or(&path);
                let key = rel
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy())
                    .collect::<Vec<_>>()
                    .join("/");
                let h = hash_file(&path)
                    .map_err(|e| CliError::runtime(&path.display().to_string(), e))?;
                out.insert(key, h);
            }
        }
    }
    Ok(out)
}
