//! Per-session forecast history: one append-only JSONL file per session,
//! replayed into memory at startup.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use rctcast_core::{EffectPrediction, SyntheticRct};

use crate::error::ServiceError;

pub const DEFAULT_SESSION: &str = "default";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub query_text: String,
    pub synthetic_rct: Option<SyntheticRct>,
    /// The synthetic RCT came from the request rather than the model.
    #[serde(default)]
    pub user_edited: bool,
    pub prediction: EffectPrediction,
    pub timestamp: String,
}

/// Session ids name files, so they are restricted to a safe alphabet.
pub fn valid_session(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

pub struct HistoryStore {
    dir: PathBuf,
    sessions: Mutex<HashMap<String, Vec<HistoryEntry>>>,
}

impl HistoryStore {
    /// Opens (creating if needed) `dir` and replays every session file.
    /// Lines that fail to parse (a torn final write) are skipped.
    pub fn open(dir: &Path) -> Result<Self, ServiceError> {
        let err = |e: std::io::Error| ServiceError::History {
            path: dir.display().to_string(),
            message: e.to_string(),
        };
        std::fs::create_dir_all(dir).map_err(err)?;
        let mut sessions = HashMap::new();
        for entry in std::fs::read_dir(dir).map_err(err)? {
            let path = entry.map_err(err)?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("jsonl") {
                continue;
            }
            let Some(session) = path.file_stem().and_then(|s| s.to_str()).filter(|s| valid_session(s)) else {
                continue;
            };
            let text = std::fs::read_to_string(&path).map_err(err)?;
            if !text.is_empty() && !text.ends_with('\n') {
                // terminate a torn line so the next append starts cleanly
                std::fs::OpenOptions::new()
                    .append(true)
                    .open(&path)
                    .and_then(|mut f| f.write_all(b"\n"))
                    .map_err(err)?;
            }
            let entries: Vec<HistoryEntry> = text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect();
            sessions.insert(session.to_string(), entries);
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            sessions: Mutex::new(sessions),
        })
    }

    pub async fn append(&self, session: &str, entry: HistoryEntry) -> std::io::Result<()> {
        let mut line = serde_json::to_string(&entry).expect("entry serializes");
        line.push('\n');
        let mut sessions = self.sessions.lock().await;
        let path = self.dir.join(format!("{session}.jsonl"));
        let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        file.write_all(line.as_bytes())?;
        file.sync_data()?;
        sessions.entry(session.to_string()).or_default().push(entry);
        Ok(())
    }

    /// Newest first.
    pub async fn list(&self, session: &str) -> Vec<HistoryEntry> {
        let sessions = self.sessions.lock().await;
        sessions.get(session).map(|v| v.iter().rev().cloned().collect()).unwrap_or_default()
    }
}
