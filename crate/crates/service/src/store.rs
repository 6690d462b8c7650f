//! Session registry with optional on-disk persistence.
//!
//! Each session is saved as `<data_dir>/<id>.json` holding its scenario, inputs
//! included, and revision. Reloading refits from those inputs; live episodes are
//! not persisted.

use crate::session::{MissionSession, SessionError};
use searchgrid_core::scenario::Scenario;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

pub type SessionHandle = Arc<tokio::sync::RwLock<MissionSession>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistedSession {
    pub id: String,
    pub revision: u64,
    pub scenario: Scenario,
}

#[derive(Default)]
pub struct SessionStore {
    sessions: RwLock<BTreeMap<String, SessionHandle>>,
    data_dir: Option<PathBuf>,
    cache_dir: Option<PathBuf>,
}

impl SessionStore {
    pub fn in_memory(cache_dir: Option<PathBuf>) -> Self {
        Self {
            cache_dir,
            ..Self::default()
        }
    }

    /// Opens `data_dir`, restoring every session saved there.
    pub fn open(data_dir: PathBuf, cache_dir: Option<PathBuf>) -> Result<Self, SessionError> {
        std::fs::create_dir_all(&data_dir).map_err(persist)?;
        let mut sessions = BTreeMap::new();
        for entry in std::fs::read_dir(&data_dir).map_err(persist)? {
            let path = entry.map_err(persist)?.path();
            if path.extension().is_none_or(|e| e != "json") {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(persist)?;
            let saved: PersistedSession =
                serde_json::from_str(&text).map_err(|e| SessionError::Persist(format!("{}: {e}", path.display())))?;
            let session = MissionSession::restore(saved.id.clone(), saved.scenario, saved.revision, cache_dir.as_deref())?;
            log::info!("restored session {} at revision {}", saved.id, saved.revision);
            sessions.insert(saved.id, Arc::new(tokio::sync::RwLock::new(session)));
        }
        Ok(Self {
            sessions: RwLock::new(sessions),
            data_dir: Some(data_dir),
            cache_dir,
        })
    }

    pub fn cache_dir(&self) -> Option<&Path> {
        self.cache_dir.as_deref()
    }

    pub fn get(&self, id: &str) -> Result<SessionHandle, SessionError> {
        self.sessions
            .read()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| SessionError::NotFound(id.to_string()))
    }

    pub fn ids(&self) -> Vec<String> {
        self.sessions.read().expect("session map lock").keys().cloned().collect()
    }

    pub fn insert(&self, session: MissionSession) -> Result<SessionHandle, SessionError> {
        self.save(&session)?;
        let id = session.id().to_string();
        let handle = Arc::new(tokio::sync::RwLock::new(session));
        self.sessions.write().expect("session map lock").insert(id, handle.clone());
        Ok(handle)
    }

    /// Writes the session file through a temporary so a crash never leaves half a file.
    pub fn save(&self, session: &MissionSession) -> Result<(), SessionError> {
        let Some(dir) = &self.data_dir else {
            return Ok(());
        };
        let saved = PersistedSession {
            id: session.id().to_string(),
            revision: session.revision(),
            scenario: session.scenario().clone(),
        };
        let text = serde_json::to_string_pretty(&saved).map_err(|e| SessionError::Persist(e.to_string()))?;
        let tmp = dir.join(format!("{}.json.tmp", saved.id));
        std::fs::write(&tmp, text).map_err(persist)?;
        std::fs::rename(&tmp, dir.join(format!("{}.json", saved.id))).map_err(persist)?;
        Ok(())
    }
}

fn persist(e: std::io::Error) -> SessionError {
    SessionError::Persist(e.to_string())
}
