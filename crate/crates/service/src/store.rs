//! On-disk layout under the data directory:
//!
//! ```text
//! studies/<study_id>/study.json      config, bank and operator token digest
//! studies/<study_id>/ledger.json     exposure ledger
//! studies/<study_id>/webhooks.jsonl  finished webhook deliveries
//! sessions/<session_id>/meta.json    owning study and client metadata
//! sessions/<session_id>/events.jsonl append-only event log
//! sessions/<session_id>/snapshot.json
//! sessions/<session_id>/result.json  rendered result of a closed session
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use adaptcat_core::bank::ItemBank;
use adaptcat_core::engine::SessionState;
use adaptcat_core::persist::{events_from_jsonl, events_to_jsonl, SessionEvent, Snapshot};
use adaptcat_core::{ExposureLedger, StudyConfig};
use serde::{Deserialize, Serialize};

use crate::webhook::WebhookDelivery;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyRecord {
    pub study_id: String,
    pub bank_ref: String,
    pub config: StudyConfig,
    pub bank: ItemBank,
    pub token_sha256: String,
    pub created_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_agent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionMeta {
    pub session_id: String,
    pub study_id: String,
    #[serde(default)]
    pub client: ClientMeta,
}

/// What was found on disk for one session.
pub struct StoredSession {
    pub meta: SessionMeta,
    pub events: io::Result<Vec<SessionEvent>>,
    pub snapshot: Option<Snapshot>,
    pub result: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

fn invalid(e: impl std::fmt::Display) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, e.to_string())
}

/// Write-then-rename so readers never see a torn file.
fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_data()?;
    }
    fs::rename(tmp, path)
}

fn read_opt(path: &Path) -> io::Result<Option<String>> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(Some(s)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e),
    }
}

fn subdirs(dir: &Path) -> io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("studies"))?;
        fs::create_dir_all(root.join("sessions"))?;
        Ok(Store { root })
    }

    fn study_dir(&self, id: &str) -> PathBuf {
        self.root.join("studies").join(id)
    }

    fn session_dir(&self, id: &str) -> PathBuf {
        self.root.join("sessions").join(id)
    }

    pub fn save_study(&self, rec: &StudyRecord, ledger: &ExposureLedger) -> io::Result<()> {
        let dir = self.study_dir(&rec.study_id);
        fs::create_dir_all(&dir)?;
        write_atomic(&dir.join("study.json"), &serde_json::to_vec(rec).map_err(invalid)?)?;
        self.save_ledger(&rec.study_id, ledger)
    }

    pub fn save_ledger(&self, study_id: &str, ledger: &ExposureLedger) -> io::Result<()> {
        let path = self.study_dir(study_id).join("ledger.json");
        write_atomic(&path, &serde_json::to_vec(ledger).map_err(invalid)?)
    }

    pub fn append_delivery(&self, study_id: &str, delivery: &WebhookDelivery) -> io::Result<()> {
        let mut line = serde_json::to_string(delivery).map_err(invalid)?;
        line.push('\n');
        self.append(&self.study_dir(study_id).join("webhooks.jsonl"), line.as_bytes())
    }

    pub fn create_session(&self, meta: &SessionMeta) -> io::Result<()> {
        let dir = self.session_dir(&meta.session_id);
        fs::create_dir_all(&dir)?;
        write_atomic(&dir.join("meta.json"), &serde_json::to_vec(meta).map_err(invalid)?)
    }

    fn append(&self, path: &Path, bytes: &[u8]) -> io::Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        f.write_all(bytes)?;
        f.sync_data()
    }

    pub fn append_events(&self, session_id: &str, events: &[SessionEvent]) -> io::Result<()> {
        if events.is_empty() {
            return Ok(());
        }
        let text = events_to_jsonl(events);
        self.append(&self.session_dir(session_id).join("events.jsonl"), text.as_bytes())
    }

    pub fn save_snapshot(&self, state: &SessionState) -> io::Result<()> {
        let snap = Snapshot::new(state.clone()).to_json();
        write_atomic(&self.session_dir(&state.session_id).join("snapshot.json"), snap.as_bytes())
    }

    pub fn save_result(&self, session_id: &str, rendered: &str) -> io::Result<()> {
        write_atomic(&self.session_dir(session_id).join("result.json"), rendered.as_bytes())
    }

    pub fn load_studies(&self) -> io::Result<Vec<(StudyRecord, Option<ExposureLedger>)>> {
        let mut out = Vec::new();
        for dir in subdirs(&self.root.join("studies"))? {
            let Some(text) = read_opt(&dir.join("study.json"))? else {
                continue;
            };
            let rec: StudyRecord = serde_json::from_str(&text).map_err(invalid)?;
            let ledger = read_opt(&dir.join("ledger.json"))?
                .map(|t| serde_json::from_str(&t))
                .transpose()
                .map_err(invalid)?;
            out.push((rec, ledger));
        }
        Ok(out)
    }

    pub fn load_sessions(&self) -> io::Result<Vec<StoredSession>> {
        let mut out = Vec::new();
        for dir in subdirs(&self.root.join("sessions"))? {
            let Some(meta) = read_opt(&dir.join("meta.json"))? else {
                continue;
            };
            let meta: SessionMeta = serde_json::from_str(&meta).map_err(invalid)?;
            let events = read_opt(&dir.join("events.jsonl"))
                .and_then(|t| events_from_jsonl(&t.unwrap_or_default()).map_err(invalid));
            let snapshot = read_opt(&dir.join("snapshot.json"))?.and_then(|t| Snapshot::from_json(&t).ok());
            let result = read_opt(&dir.join("result.json"))?;
            out.push(StoredSession {
                meta,
                events,
                snapshot,
                result,
            });
        }
        Ok(out)
    }
}
