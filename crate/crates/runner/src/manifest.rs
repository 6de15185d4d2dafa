//! Run manifest: what ran, with which inputs, and the content hash of every
//! file the run wrote.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use rctcast_core::llm::ClientStats;
use rctcast_core::template::sha256_hex;

use crate::error::RunError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    /// Hash of everything the stage's output depends on.
    pub stage_hash: String,
    /// Output paths relative to the run directory, with content hashes.
    pub outputs: BTreeMap<String, String>,
    pub items: usize,
    pub elapsed_ms: u64,
    /// Outputs were reused from a previous run.
    pub resumed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub run_name: String,
    pub config_hash: String,
    pub config: Value,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub total_elapsed_ms: u64,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub stages: Vec<StageRecord>,
    pub llm: ClientStats,
    /// Every file under the run directory except this manifest.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

impl Manifest {
    pub fn new(run_name: String, config: Value) -> Self {
        let config_hash = hash_json(&config);
        Self {
            tool_version: TOOL_VERSION.to_string(),
            run_name,
            config_hash,
            config,
            started_at: now(),
            finished_at: None,
            total_elapsed_ms: 0,
            status: RunStatus::Running,
            failure: None,
            stages: Vec::new(),
            llm: ClientStats::default(),
            files: BTreeMap::new(),
        }
    }

    pub fn load(run_dir: &Path) -> Result<Option<Self>, RunError> {
        let path = run_dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| RunError::io(&path, e))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| RunError::Data(format!("{}: {e}", path.display())))
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// Recomputes the file table and writes the manifest.
    pub fn save(&mut self, run_dir: &Path) -> Result<(), RunError> {
        self.files = hash_tree(run_dir)?;
        let path = run_dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| RunError::io(&path, e))
    }
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub fn hash_json(v: &Value) -> String {
    sha256_hex(&serde_json::to_string(v).expect("json value serializes"))
}

pub fn hash_file(path: &Path) -> Result<String, RunError> {
    let bytes = std::fs::read(path).map_err(|e| RunError::io(path, e))?;
    Ok(rctcast_core::template::sha256_bytes(&bytes))
}

/// Forward-slash relative path, stable across platforms.
pub fn rel(run_dir: &Path, path: &Path) -> String {
    path.strip_prefix(run_dir)
        .unwrap_or(path)
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

pub fn hash_tree(run_dir: &Path) -> Result<BTreeMap<String, String>, RunError> {
    let mut files = BTreeMap::new();
    if !run_dir.exists() {
        return Ok(files);
    }
    for entry in walkdir::WalkDir::new(run_dir) {
        let entry = entry.map_err(|e| RunError::io(run_dir, e))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let name = rel(run_dir, entry.path());
        if name != MANIFEST_FILE {
            files.insert(name, hash_file(entry.path())?);
        }
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_table_excludes_manifest() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("a")).unwrap();
        std::fs::write(dir.path().join("a/x.jsonl"), "1\n").unwrap();
        let mut m = Manifest::new("r".into(), serde_json::json!({"k": 1}));
        m.save(dir.path()).unwrap();
        assert_eq!(m.files.len(), 1);
        assert_eq!(m.files["a/x.jsonl"], rctcast_core::template::sha256_bytes(b"1\n"));
        let back = Manifest::load(dir.path()).unwrap().unwrap();
        assert_eq!(back, m);
    }
}
