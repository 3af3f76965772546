use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use intentrank_core::data::Bundle;
use intentrank_core::session::{Session, SessionConfig};
use serde::Serialize;

use crate::error::ApiError;
use crate::ServiceConfig;

pub(crate) struct LiveSession {
    pub bundle: Arc<Bundle>,
    pub session: Session,
}

/// Bundle registry and live sessions.
///
/// The registry is read-mostly behind an `RwLock`; each session has its own
/// mutex, so feedback for one session is serialized while other sessions
/// proceed in parallel.
pub struct AppState {
    pub(crate) defaults: SessionConfig,
    persist_dir: Option<PathBuf>,
    bundles: RwLock<HashMap<String, Arc<Bundle>>>,
    sessions: RwLock<HashMap<String, Arc<Mutex<LiveSession>>>>,
}

pub(crate) enum Registered {
    Created,
    Unchanged,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> std::io::Result<Self> {
        if let Some(dir) = &config.persist_dir {
            fs::create_dir_all(dir)?;
        }
        Ok(Self {
            defaults: config.defaults,
            persist_dir: config.persist_dir,
            bundles: RwLock::new(HashMap::new()),
            sessions: RwLock::new(HashMap::new()),
        })
    }

    pub(crate) fn register_bundle(&self, bundle: Bundle) -> Result<Registered, ApiError> {
        let mut bundles = self.bundles.write().expect("bundle registry poisoned");
        match bundles.get(bundle.image_id()) {
            Some(existing) if **existing == bundle => Ok(Registered::Unchanged),
            Some(_) => Err(ApiError::conflict(format!(
                "bundle {} is already registered with different content",
                bundle.image_id()
            ))),
            None => {
                bundles.insert(bundle.image_id().to_owned(), Arc::new(bundle));
                Ok(Registered::Created)
            }
        }
    }

    pub(crate) fn bundle(&self, id: &str) -> Result<Arc<Bundle>, ApiError> {
        self.bundles
            .read()
            .expect("bundle registry poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("bundle", id))
    }

    pub(crate) fn insert_session(&self, id: String, live: LiveSession) -> Arc<Mutex<LiveSession>> {
        let entry = Arc::new(Mutex::new(live));
        self.sessions
            .write()
            .expect("session table poisoned")
            .insert(id, Arc::clone(&entry));
        entry
    }

    pub(crate) fn session(&self, id: &str) -> Result<Arc<Mutex<LiveSession>>, ApiError> {
        self.sessions
            .read()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("session", id))
    }

    /// Appends one JSON line to the session's log, if persistence is on.
    pub(crate) fn log_event<T: Serialize>(&self, session_id: &str, event: &T) {
        let Some(dir) = &self.persist_dir else { return };
        let path = dir.join(format!("{session_id}.jsonl"));
        let result = serde_json::to_string(event)
            .map_err(std::io::Error::other)
            .and_then(|line| {
                let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
                writeln!(f, "{line}")
            });
        if let Err(e) = result {
            tracing::warn!(path = %path.display(), error = %e, "could not append session log");
        }
    }
}
