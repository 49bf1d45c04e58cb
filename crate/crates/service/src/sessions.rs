//! One append-only JSON-lines file per session.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use modalgate_core::model::Modality;
use modalgate_core::prompting::{ConversationHistory, Role, Turn};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptTurn {
    pub role: Role,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<Modality>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact_url: Option<String>,
    pub unix_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Created { id: String, unix_ms: u64 },
    Turn(TranscriptTurn),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Session {
    pub id: String,
    pub created_unix_ms: u64,
    pub updated_unix_ms: u64,
    pub turns: Vec<TranscriptTurn>,
}

impl Session {
    /// The most recent turns, bounded by `max_turns`.
    pub fn history(&self, max_turns: usize) -> ConversationHistory {
        ConversationHistory::from_turns(
            self.turns.iter().map(|t| Turn {
                role: t.role,
                text: t.text.clone(),
            }),
            max_turns,
        )
    }
}

pub fn is_session_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

#[derive(Debug, Default)]
pub struct SessionStore {
    dir: PathBuf,
    locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
}

impl SessionStore {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            locks: Mutex::default(),
        })
    }

    fn path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.jsonl"))
    }

    fn append(&self, id: &str, events: &[Event]) -> std::io::Result<()> {
        let mut buf = Vec::new();
        for e in events {
            serde_json::to_writer(&mut buf, e).map_err(std::io::Error::other)?;
            buf.push(b'\n');
        }
        let mut f = std::fs::OpenOptions::new().append(true).create(true).open(self.path(id))?;
        f.write_all(&buf)?;
        f.sync_data()
    }

    pub fn create(&self, unix_ms: u64) -> std::io::Result<String> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        self.append(&id, &[Event::Created { id: id.clone(), unix_ms }])?;
        Ok(id)
    }

    pub fn exists(&self, id: &str) -> bool {
        is_session_id(id) && self.path(id).is_file()
    }

    /// Lock serializing respond calls on one session.
    pub fn lock(&self, id: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.locks.lock().expect("lock poisoned").entry(id.to_string()).or_default().clone()
    }

    /// Reads a transcript. A torn final line from a crash mid-append is
    /// skipped.
    pub fn load(&self, id: &str) -> std::io::Result<Option<Session>> {
        if !self.exists(id) {
            return Ok(None);
        }
        let file = std::fs::File::open(self.path(id))?;
        let lines: Vec<String> = std::io::BufReader::new(file).lines().collect::<Result<_, _>>()?;
        let mut session = Session {
            id: id.to_string(),
            created_unix_ms: 0,
            updated_unix_ms: 0,
            turns: Vec::new(),
        };
        let last = lines.len().saturating_sub(1);
        for (idx, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Event>(line) {
                Ok(Event::Created { unix_ms, .. }) => {
                    session.created_unix_ms = unix_ms;
                    session.updated_unix_ms = unix_ms;
                }
                Ok(Event::Turn(t)) => {
                    session.updated_unix_ms = t.unix_ms;
                    session.turns.push(t);
                }
                Err(e) if idx == last => tracing::warn!(session = id, error = %e, "skipping torn transcript line"),
                Err(e) => return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{id}: line {}: {e}", idx + 1))),
            }
        }
        Ok(Some(session))
    }

    /// Appends a user turn and its reply in one write.
    pub fn append_exchange(&self, id: &str, user: TranscriptTurn, assistant: TranscriptTurn) -> std::io::Result<()> {
        self.append(id, &[Event::Turn(user), Event::Turn(assistant)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn turn(role: Role, text: &str, unix_ms: u64) -> TranscriptTurn {
        TranscriptTurn {
            role,
            text: text.into(),
            modality: None,
            artifact_url: None,
            unix_ms,
        }
    }

    #[test]
    fn create_append_load() {
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::open(dir.path()).unwrap();
        let id = store.create(5).unwrap();
        assert!(store.exists(&id));
        assert!(!store.exists("../x"));
        assert!(store.load(&id).unwrap().unwrap().turns.is_empty());
        store
            .append_exchange(&id, turn(Role::User, "hi", 6), turn(Role::Assistant, "hello", 7))
            .unwrap();
        store
            .append_exchange(&id, turn(Role::User, "again", 8), turn(Role::Assistant, "sure", 9))
            .unwrap();
        let s = store.load(&id).unwrap().unwrap();
        assert_eq!(s.turns.len(), 4);
        assert_eq!((s.created_unix_ms, s.updated_unix_ms), (5, 9));
        let h = s.history(3);
        assert_eq!(h.turns().map(|t| t.text.as_str()).collect::<Vec<_>>(), ["hello", "again", "sure"]);
    }

    #[test]
    fn torn_tail_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::open(dir.path()).unwrap();
        let id = store.create(1).unwrap();
        store.append_exchange(&id, turn(Role::User, "a", 2), turn(Role::Assistant, "b", 3)).unwrap();
        let mut f = std::fs::OpenOptions::new().append(true).open(store.path(&id)).unwrap();
        f.write_all(br#"{"event":"turn","role":"us"#).unwrap();
        assert_eq!(store.load(&id).unwrap().unwrap().turns.len(), 2);
    }
}
