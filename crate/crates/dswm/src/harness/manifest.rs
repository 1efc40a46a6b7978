//! Output manifest: records which stages completed under which config
//! hash, and every file they produced. Reruns consult it to skip finished
//! work; a changed config hash invalidates everything.

use crate::harness::{HarnessError, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct StageEntry {
    pub files: Vec<String>,
    pub completed: bool,
}

#[derive(Serialize, Deserialize, Debug)]
pub struct Manifest {
    pub config_hash: String,
    pub master_seed: u64,
    pub stages: BTreeMap<String, StageEntry>,
}

impl Manifest {
    /// Load the manifest at `path` if it matches `config_hash`; otherwise
    /// start a fresh one (stale results are never trusted).
    pub fn load_or_new(path: &Path, config_hash: &str, master_seed: u64) -> Manifest {
        if let Ok(text) = std::fs::read_to_string(path) {
            if let Ok(manifest) = serde_json::from_str::<Manifest>(&text) {
                if manifest.config_hash == config_hash && manifest.master_seed == master_seed {
                    return manifest;
                }
            }
        }
        Manifest {
            config_hash: config_hash.to_string(),
            master_seed,
            stages: BTreeMap::new(),
        }
    }

    /// A stage counts as complete only if it was recorded complete and all
    /// its files still exist under `root`.
    pub fn is_complete(&self, root: &Path, stage: &str) -> bool {
        match self.stages.get(stage) {
            Some(entry) => entry.completed && entry.files.iter().all(|f| root.join(f).is_file()),
            None => false,
        }
    }

    /// Record a completed stage with its output files (paths relative to the
    /// output root).
    pub fn record(&mut self, stage: &str, files: Vec<PathBuf>) {
        let files = files
            .into_iter()
            .map(|f| f.to_string_lossy().into_owned())
            .collect();
        self.stages.insert(stage.to_string(), StageEntry { files, completed: true });
    }

    /// Every recorded file, relative to the output root.
    pub fn all_files(&self) -> Vec<String> {
        let mut files: Vec<String> =
            self.stages.values().flat_map(|e| e.files.iter().cloned()).collect();
        files.sort();
        files.dedup();
        files
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .expect("manifest serialization cannot fail");
        crate::harness::io::atomic_write(path, text.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}
