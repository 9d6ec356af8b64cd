//! In-memory session store with expiry and an optional append-only journal.
//!
//! The journal is JSON lines, one full session snapshot per line, written
//! after every creation and every accepted mutation. On start the last
//! snapshot of each session that has not expired is restored.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use cdr_agent::AnalysisSession;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

/// A session guarded so that its mutations are applied one at a time.
pub type SessionHandle = Arc<tokio::sync::Mutex<AnalysisSession>>;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("journal {path}: {source}")]
    Journal {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

struct Slot {
    session: SessionHandle,
    touched: Instant,
}

#[derive(Serialize, Deserialize)]
struct JournalLine {
    /// Seconds since the Unix epoch.
    saved_at: f64,
    session: AnalysisSession,
}

struct Journal {
    path: PathBuf,
    file: Mutex<File>,
}

pub struct SessionStore {
    ttl: Duration,
    slots: Mutex<HashMap<String, Slot>>,
    journal: Option<Journal>,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

impl SessionStore {
    /// Memory-only store; sessions idle for longer than `ttl` are dropped.
    pub fn new(ttl: Duration) -> Self {
        SessionStore {
            ttl,
            slots: Mutex::new(HashMap::new()),
            journal: None,
        }
    }

    /// Store backed by the journal at `path`, restoring unexpired sessions
    /// from it first. Unreadable lines (e.g. a torn final write) are skipped.
    pub fn with_journal(ttl: Duration, path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let io_err = |source| StoreError::Journal {
            path: path.clone(),
            source,
        };
        let mut restored: HashMap<String, (f64, AnalysisSession)> = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path).map_err(io_err)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(io_err)?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<JournalLine>(&line) {
                    Ok(j) => {
                        restored.insert(j.session.session_id.clone(), (j.saved_at, j.session));
                    }
                    Err(e) => tracing::warn!(line = i + 1, error = %e, "skipping unreadable journal line"),
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err)?;

        let now = unix_now();
        let mut slots = HashMap::new();
        for (id, (saved_at, session)) in restored {
            let age = Duration::from_secs_f64((now - saved_at).max(0.0));
            if age >= ttl {
                continue;
            }
            let touched = Instant::now().checked_sub(age).unwrap_or_else(Instant::now);
            slots.insert(
                id,
                Slot {
                    session: Arc::new(tokio::sync::Mutex::new(session)),
                    touched,
                },
            );
        }
        tracing::info!(sessions = slots.len(), path = %path.display(), "journal replayed");
        Ok(SessionStore {
            ttl,
            slots: Mutex::new(slots),
            journal: Some(Journal {
                path,
                file: Mutex::new(file),
            }),
        })
    }

    pub fn ttl(&self) -> Duration {
        self.ttl
    }

    pub fn insert(&self, session: AnalysisSession) -> SessionHandle {
        self.record(&session);
        let id = session.session_id.clone();
        let handle = Arc::new(tokio::sync::Mutex::new(session));
        self.slots.lock().insert(
            id,
            Slot {
                session: handle.clone(),
                touched: Instant::now(),
            },
        );
        handle
    }

    /// Look up a session and mark it as used. Expired sessions are removed.
    pub fn get(&self, id: &str) -> Option<SessionHandle> {
        let mut slots = self.slots.lock();
        let slot = slots.get_mut(id)?;
        if slot.touched.elapsed() >= self.ttl {
            slots.remove(id);
            return None;
        }
        slot.touched = Instant::now();
        Some(slot.session.clone())
    }

    /// Append a snapshot to the journal, if there is one. A failed write is
    /// logged; the in-memory session stays authoritative.
    pub fn record(&self, session: &AnalysisSession) {
        let Some(journal) = &self.journal else {
            return;
        };
        let line = JournalLine {
            saved_at: unix_now(),
            session: session.clone(),
        };
        let mut text = match serde_json::to_string(&line) {
            Ok(t) => t,
            Err(e) => {
                tracing::error!(error = %e, "cannot serialize session for the journal");
                return;
            }
        };
        text.push('\n');
        let mut file = journal.file.lock();
        if let Err(e) = file.write_all(text.as_bytes()).and_then(|_| file.flush()) {
            tracing::error!(path = %journal.path.display(), error = %e, "journal write failed");
        }
    }

    /// Drop every expired session; returns how many were dropped.
    pub fn sweep(&self) -> usize {
        let mut slots = self.slots.lock();
        let before = slots.len();
        slots.retain(|_, s| s.touched.elapsed() < self.ttl);
        before - slots.len()
    }

    pub fn len(&self) -> usize {
        self.slots.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cdr_agent::pipeline::Timings;
    use cdr_agent::{ExecutionReport, NoteMeta, PipelineConfig, SessionStatus};
    use std::collections::BTreeMap;

    fn session(id: &str) -> AnalysisSession {
        AnalysisSession {
            session_id: id.into(),
            note: "n".into(),
            note_meta: NoteMeta::default(),
            config: PipelineConfig::default(),
            profile: None,
            extractions: Vec::new(),
            verdicts: Vec::new(),
            pending: BTreeMap::new(),
            report: ExecutionReport::default(),
            timings: Timings::default(),
            status: SessionStatus::Completed,
            error: None,
        }
    }

    #[test]
    fn expired_sessions_disappear() {
        let store = SessionStore::new(Duration::from_millis(30));
        store.insert(session("a"));
        assert!(store.get("a").is_some());
        std::thread::sleep(Duration::from_millis(40));
        assert!(store.get("a").is_none());
        store.insert(session("b"));
        std::thread::sleep(Duration::from_millis(40));
        assert_eq!(store.sweep(), 1);
        assert!(store.is_empty());
    }

    #[tokio::test]
    async fn journal_restores_latest_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sessions.jsonl");
        let ttl = Duration::from_secs(60);
        {
            let store = SessionStore::with_journal(ttl, &path).unwrap();
            let h = store.insert(session("a"));
            store.insert(session("b"));
            let mut s = h.lock().await;
            s.status = SessionStatus::Error;
            store.record(&s);
        }
        std::fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .unwrap()
            .write_all(b"{\"saved_at\": 1, \"sess")
            .unwrap();
        let store = SessionStore::with_journal(ttl, &path).unwrap();
        assert_eq!(store.len(), 2);
        let a = store.get("a").unwrap();
        assert_eq!(a.lock().await.status, SessionStatus::Error);
    }

    #[test]
    fn journal_skips_expired_snapshots() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sessions.jsonl");
        let old = JournalLine {
            saved_at: unix_now() - 3600.0,
            session: session("old"),
        };
        std::fs::write(&path, serde_json::to_string(&old).unwrap() + "\n").unwrap();
        let store = SessionStore::with_journal(Duration::from_secs(60), &path).unwrap();
        assert!(store.get("old").is_none());
    }
}
