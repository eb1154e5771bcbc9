use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use adaptcat_core::bank::{generate_bank, load_bank_file, BankSpec, ItemBank};
use adaptcat_core::engine::{
    validate_demographics, DemographicField, Disposition, EngineError, Phase, SessionResult,
};
use adaptcat_core::persist::{diff_events, replay, ReplayMode, SessionEvent};
use adaptcat_core::{Engine, ExposureLedger, Item, Model, Response, SessionState, StopReason, StudyConfig};
use axum::http::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;
use uuid::Uuid;

use crate::error::ApiError;
use crate::store::{ClientMeta, SessionMeta, Store, StudyRecord};
use crate::webhook::{deliver, webhook_payload, DeliveryStatus, WebhookDelivery, WebhookPolicy};

pub const DEMO_BANK: &str = "demo";
pub const DEMO_BANK_ITEMS: usize = 300;
pub const DEMO_BANK_SEED: u64 = 2024;

/// Milliseconds since the Unix epoch.
pub type Clock = Arc<dyn Fn() -> u64 + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64)
    })
}

#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    /// Without a data directory everything lives in memory.
    pub data_dir: Option<PathBuf>,
    /// Directory searched for `<name>.csv` / `<name>.json` bank references.
    pub bank_dir: Option<PathBuf>,
    pub webhook: WebhookPolicy,
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("data directory: {0}")]
    Io(#[from] std::io::Error),
    #[error("stored study {study}: {message}")]
    Study { study: String, message: String },
}

/// Where a study's items come from.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum BankRef {
    /// `"demo"` or the stem of a file in the bank directory.
    Named(String),
    Generated {
        generate: BankSpec,
    },
    Inline {
        #[serde(default)]
        name: Option<String>,
        items: Vec<Item>,
    },
}

impl Default for BankRef {
    fn default() -> Self {
        BankRef::Named(DEMO_BANK.into())
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct CreateStudy {
    pub config: StudyConfig,
    #[serde(default)]
    pub bank: BankRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankInfo {
    pub name: String,
    pub model: Model,
    pub items: usize,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyCreated {
    pub study_id: String,
    /// Bearer token for the operator endpoints. Shown once.
    pub operator_token: String,
    pub bank: BankInfo,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct CreateSession {
    #[serde(default)]
    pub demographics: Option<BTreeMap<String, Value>>,
    #[serde(default)]
    pub client: ClientMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseSchema {
    #[serde(rename = "type")]
    pub kind: String,
    pub minimum: u32,
    pub maximum: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemView {
    pub item_id: String,
    /// 1-based position in the session.
    pub position: usize,
    pub model: Model,
    pub categories: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    pub response_schema: ResponseSchema,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub items_completed: usize,
    pub max_items: usize,
    /// `items_completed / max_items`.
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Step {
    Demographics {
        fields: Vec<DemographicField>,
    },
    Item {
        item: ItemView,
        progress: Progress,
    },
    Finished {
        #[serde(default)]
        stop_reason: Option<StopReason>,
        result: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub step: Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseBody {
    pub item_id: String,
    pub value: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressSnapshot {
    pub items_completed: usize,
    pub max_items: usize,
    pub progress: f64,
    pub finished: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub se: Option<f64>,
    pub next: Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureView {
    pub sessions: u64,
    pub max_rate: f64,
    pub mean_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub study_id: String,
    pub bank: BankInfo,
    pub config: StudyConfig,
    pub created_ms: u64,
    pub sessions: BTreeMap<String, usize>,
    pub exposure: ExposureView,
    pub webhooks: Vec<WebhookDelivery>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub studies: usize,
    pub sessions: usize,
    pub persistent: bool,
    pub restored_sessions: usize,
}

pub(crate) struct Study {
    id: String,
    bank_ref: String,
    engine: Engine,
    token_sha256: String,
    created_ms: u64,
    /// The single writer for this study's exposure counts.
    ledger: Mutex<ExposureLedger>,
    counter: AtomicU64,
    deliveries: Mutex<Vec<WebhookDelivery>>,
}

impl Study {
    fn bank_info(&self) -> BankInfo {
        let bank = self.engine.bank();
        BankInfo {
            name: self.bank_ref.clone(),
            model: bank.model,
            items: bank.len(),
            fingerprint: self.engine.bank_fingerprint().to_string(),
        }
    }

    fn authorized(&self, bearer: Option<&str>) -> bool {
        bearer.is_some_and(|t| digest(t) == self.token_sha256)
    }
}

/// Both renderings of a closed session, fixed at close time.
struct Rendered {
    full: String,
    examinee: String,
}

impl Rendered {
    fn new(full: String, result: &SessionResult, expose_theta: bool) -> Self {
        let examinee = if expose_theta {
            full.clone()
        } else {
            examinee_view(result)
        };
        Rendered { full, examinee }
    }
}

struct Live {
    study: Arc<Study>,
    state: SessionState,
    client: ClientMeta,
    result: Option<Rendered>,
}

struct Inner {
    config: ServiceConfig,
    store: Option<Store>,
    clock: Clock,
    http: reqwest::Client,
    studies: RwLock<HashMap<String, Arc<Study>>>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Live>>>>,
    restored: usize,
}

/// The session service. Cheap to clone; clones share state.
#[derive(Clone)]
pub struct Service {
    inner: Arc<Inner>,
}

fn digest(token: &str) -> String {
    hex::encode(Sha256::digest(token.as_bytes()))
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

fn io_error(e: std::io::Error) -> ApiError {
    tracing::error!(error = %e, "persistence failure");
    ApiError::internal(format!("persistence failure: {e}"))
}

fn is_closed(phase: Phase) -> bool {
    matches!(phase, Phase::Finished | Phase::Expired)
}

fn result_pointer(session_id: &str) -> String {
    format!("/sessions/{session_id}/result")
}

fn examinee_view(result: &SessionResult) -> String {
    let items: Vec<Value> = result
        .records
        .iter()
        .map(|r| json!({"item_id": r.item_id, "response": r.response, "latency_ms": r.latency_ms}))
        .collect();
    json!({
        "session_id": result.session_id,
        "disposition": result.disposition,
        "stop_reason": result.stop_reason,
        "items_administered": result.items_administered,
        "items": items,
        "started_ms": result.started_ms,
        "ended_ms": result.ended_ms,
        "duration_ms": result.duration_ms,
        "warnings": result.warnings,
    })
    .to_string()
}

fn valid_bank_name(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl Service {
    pub fn open(config: ServiceConfig) -> Result<Self, ServiceError> {
        Self::open_with_clock(config, system_clock())
    }

    /// Opens the service, replaying every persisted session.
    pub fn open_with_clock(config: ServiceConfig, clock: Clock) -> Result<Self, ServiceError> {
        let store = config.data_dir.as_ref().map(Store::open).transpose()?;
        let mut studies = HashMap::new();
        let mut sessions = HashMap::new();
        let mut restored = 0;

        if let Some(store) = &store {
            for (rec, ledger) in store.load_studies()? {
                let engine = Engine::new(rec.config, rec.bank).map_err(|e| ServiceError::Study {
                    study: rec.study_id.clone(),
                    message: e.to_string(),
                })?;
                let ledger = ledger.unwrap_or_else(|| engine.new_ledger());
                let study = Study {
                    id: rec.study_id.clone(),
                    bank_ref: rec.bank_ref,
                    engine,
                    token_sha256: rec.token_sha256,
                    created_ms: rec.created_ms,
                    ledger: Mutex::new(ledger),
                    counter: AtomicU64::new(0),
                    deliveries: Mutex::new(Vec::new()),
                };
                studies.insert(rec.study_id, Arc::new(study));
            }
            for stored in store.load_sessions()? {
                let sid = stored.meta.session_id.clone();
                let Some(study) = studies.get(&stored.meta.study_id) else {
                    tracing::warn!(session = %sid, "session belongs to an unknown study; skipped");
                    continue;
                };
                let replayed = stored
                    .events
                    .map_err(|e| e.to_string())
                    .and_then(|ev| replay(&study.engine, &ev, ReplayMode::Auto).map_err(|e| e.to_string()));
                let state = match (replayed, stored.snapshot) {
                    (Ok(state), _) => state,
                    (Err(e), Some(snap)) => {
                        tracing::warn!(session = %sid, error = %e, "event log unusable; using snapshot");
                        snap.state
                    }
                    (Err(e), None) => {
                        tracing::warn!(session = %sid, error = %e, "session cannot be restored; skipped");
                        continue;
                    }
                };
                study.counter.fetch_add(1, Ordering::Relaxed);
                let mut live = Live {
                    study: study.clone(),
                    state,
                    client: stored.meta.client,
                    result: None,
                };
                if is_closed(live.state.phase) {
                    let expose = study.engine.config().expose_theta;
                    live.result = match stored.result {
                        Some(full) => {
                            let parsed: Option<SessionResult> = serde_json::from_str(&full).ok();
                            parsed.map(|r| Rendered::new(full, &r, expose))
                        }
                        None => None,
                    };
                    if live.result.is_none() {
                        let result = study.engine.finalize(&live.state).map_err(|e| ServiceError::Study {
                            study: study.id.clone(),
                            message: e.to_string(),
                        })?;
                        let full = serde_json::to_string(&result).expect("results serialize");
                        store.save_result(&sid, &full)?;
                        live.result = Some(Rendered::new(full, &result, expose));
                    }
                }
                restored += 1;
                sessions.insert(sid, Arc::new(Mutex::new(live)));
            }
        }

        Ok(Service {
            inner: Arc::new(Inner {
                config,
                store,
                clock,
                http: reqwest::Client::new(),
                studies: RwLock::new(studies),
                sessions: RwLock::new(sessions),
                restored,
            }),
        })
    }

    fn now(&self) -> u64 {
        (self.inner.clock)()
    }

    fn study(&self, id: &str) -> Result<Arc<Study>, ApiError> {
        let studies = self.inner.studies.read().unwrap_or_else(|p| p.into_inner());
        studies.get(id).cloned().ok_or_else(|| ApiError::study_not_found(id))
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Live>>, ApiError> {
        let sessions = self.inner.sessions.read().unwrap_or_else(|p| p.into_inner());
        sessions.get(id).cloned().ok_or_else(|| ApiError::session_not_found(id))
    }

    fn operator(&self, study_id: &str, bearer: Option<&str>) -> Result<Arc<Study>, ApiError> {
        let study = self.study(study_id)?;
        if study.authorized(bearer) {
            Ok(study)
        } else {
            Err(ApiError::unauthorized())
        }
    }

    fn resolve_bank(&self, bank: &BankRef, model: Model) -> Result<(String, ItemBank), ApiError> {
        let unknown = |name: &str| {
            ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "unknown_bank", format!("no bank named {name:?}"))
        };
        let invalid = |e: adaptcat_core::bank::BankError| {
            let details = match &e {
                adaptcat_core::bank::BankError::Invalid(v) => json!({ "violations": v }),
                _ => Value::Null,
            };
            ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_bank", e.to_string()).with_details(details)
        };
        match bank {
            BankRef::Named(name) if name == DEMO_BANK => {
                let bank = generate_bank(&BankSpec::new(model, DEMO_BANK_ITEMS, DEMO_BANK_SEED)).map_err(invalid)?;
                Ok((name.clone(), bank))
            }
            BankRef::Named(name) => {
                let dir = self.inner.config.bank_dir.as_ref().ok_or_else(|| unknown(name))?;
                if !valid_bank_name(name) {
                    return Err(unknown(name));
                }
                let path = ["csv", "json"]
                    .iter()
                    .map(|ext| dir.join(format!("{name}.{ext}")))
                    .find(|p| p.is_file())
                    .ok_or_else(|| unknown(name))?;
                Ok((name.clone(), load_bank_file(&path).map_err(invalid)?))
            }
            BankRef::Generated { generate } => {
                let bank = generate_bank(generate).map_err(invalid)?;
                Ok((format!("generated-{}-{}", generate.n_items, generate.seed), bank))
            }
            BankRef::Inline { name, items } => {
                let name = name.clone().unwrap_or_else(|| "inline".into());
                let model = items.first().map_or(model, |it| it.model);
                let bank = ItemBank::validated(name.clone(), model, items.clone()).map_err(invalid)?;
                Ok((name, bank))
            }
        }
    }

    pub fn create_study(&self, req: CreateStudy) -> Result<StudyCreated, ApiError> {
        let (bank_ref, bank) = self.resolve_bank(&req.bank, req.config.model)?;
        let engine = Engine::new(req.config, bank).map_err(|e| match e {
            EngineError::Estimate(inner) => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_config", inner.to_string())
            }
            other => ApiError::from(other),
        })?;
        let study_id = Uuid::new_v4().simple().to_string();
        let token = format!("op_{}{}", Uuid::new_v4().simple(), Uuid::new_v4().simple());
        let ledger = engine.new_ledger();
        let rec = StudyRecord {
            study_id: study_id.clone(),
            bank_ref: bank_ref.clone(),
            config: engine.config().clone(),
            bank: engine.bank().clone(),
            token_sha256: digest(&token),
            created_ms: self.now(),
        };
        if let Some(store) = &self.inner.store {
            store.save_study(&rec, &ledger).map_err(io_error)?;
        }
        let study = Arc::new(Study {
            id: study_id.clone(),
            bank_ref,
            engine,
            token_sha256: rec.token_sha256,
            created_ms: rec.created_ms,
            ledger: Mutex::new(ledger),
            counter: AtomicU64::new(0),
            deliveries: Mutex::new(Vec::new()),
        });
        let bank = study.bank_info();
        self.inner
            .studies
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .insert(study_id.clone(), study);
        tracing::info!(study = %study_id, bank = %bank.name, "study created");
        Ok(StudyCreated {
            study_id,
            operator_token: token,
            bank,
        })
    }

    pub fn create_session(&self, study_id: &str, req: CreateSession) -> Result<SessionCreated, ApiError> {
        let study = self.study(study_id)?;
        let engine = &study.engine;
        let now = self.now();
        let n = study.counter.fetch_add(1, Ordering::Relaxed);
        let seed = engine
            .config()
            .seed
            .map_or_else(|| Uuid::new_v4().as_u64_pair().0, |s| s.wrapping_add(n));
        let session_id = Uuid::new_v4().simple().to_string();
        let mut state = engine.start_session(session_id.clone(), seed, now);
        let mut log = vec![SessionEvent::created(&state)];
        let before = state.clone();

        let payload = req.demographics.filter(|d| !d.is_empty());
        match (state.phase, payload) {
            (Phase::Demographics, Some(values)) => engine.submit_demographics(&mut state, &values, now)?,
            (Phase::Demographics, None) => {}
            (_, Some(values)) => {
                let errors = validate_demographics(&[], &values).err().unwrap_or_default();
                return Err(EngineError::Demographics(errors).into());
            }
            (_, None) => engine.begin(&mut state, now)?,
        }
        if state.phase == Phase::Running {
            let mut ledger = lock(&study.ledger);
            ledger.open_session();
            engine.next_item(&mut state, Some(&ledger), now)?;
            if let Some(store) = &self.inner.store {
                store.save_ledger(&study.id, &ledger).map_err(io_error)?;
            }
        }
        log.extend(diff_events(&before, &state));

        let meta = SessionMeta {
            session_id: session_id.clone(),
            study_id: study.id.clone(),
            client: req.client,
        };
        if let Some(store) = &self.inner.store {
            store.create_session(&meta).map_err(io_error)?;
            store.append_events(&session_id, &log).map_err(io_error)?;
            store.save_snapshot(&state).map_err(io_error)?;
        }
        let mut live = Live {
            study: study.clone(),
            state,
            client: meta.client,
            result: None,
        };
        self.close_if_done(&mut live)?;
        let step = step_of(&live);
        self.inner
            .sessions
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .insert(session_id.clone(), Arc::new(Mutex::new(live)));
        Ok(SessionCreated { session_id, step })
    }

    /// Runs `f` against the session, then appends the resulting events,
    /// refreshes the snapshot and closes the session if it ended. Idle
    /// sessions expire before `f` sees them.
    fn mutate<T>(
        &self,
        live: &mut Live,
        f: impl FnOnce(&Study, &mut SessionState, u64) -> Result<T, ApiError>,
    ) -> Result<T, ApiError> {
        let now = self.now();
        let before = live.state.clone();
        let study = live.study.clone();
        study.engine.expire_if_idle(&mut live.state, now);
        let out = if live.state.phase == Phase::Expired {
            Err(expired(&live.state.session_id))
        } else {
            f(&study, &mut live.state, now)
        };
        let events = diff_events(&before, &live.state);
        if !events.is_empty() {
            if let Some(store) = &self.inner.store {
                store.append_events(&live.state.session_id, &events).map_err(io_error)?;
                store.save_snapshot(&live.state).map_err(io_error)?;
            }
        }
        self.close_if_done(live)?;
        out
    }

    fn close_if_done(&self, live: &mut Live) -> Result<(), ApiError> {
        if live.result.is_some() || !is_closed(live.state.phase) {
            return Ok(());
        }
        let study = live.study.clone();
        let result = study.engine.finalize(&live.state)?;
        let full = serde_json::to_string(&result).expect("results serialize");
        if let Some(store) = &self.inner.store {
            store.save_result(&live.state.session_id, &full).map_err(io_error)?;
        }
        live.result = Some(Rendered::new(full, &result, study.engine.config().expose_theta));
        tracing::info!(
            session = %result.session_id,
            items = result.items_administered,
            disposition = ?result.disposition,
            "session closed"
        );
        if result.disposition == Disposition::Completed {
            if let Some(target) = study.engine.config().results_webhook.clone() {
                self.spawn_delivery(&study, target, &result);
            }
        }
        Ok(())
    }

    fn spawn_delivery(&self, study: &Arc<Study>, target: String, result: &SessionResult) {
        let Ok(handle) = tokio::runtime::Handle::try_current() else {
            tracing::warn!(session = %result.session_id, "no async runtime; webhook not sent");
            return;
        };
        let delivery = WebhookDelivery {
            session_id: result.session_id.clone(),
            target,
            payload: webhook_payload(&study.id, result),
            attempts: 0,
            status: DeliveryStatus::Pending,
            last_error: None,
        };
        let slot = {
            let mut list = lock(&study.deliveries);
            list.push(delivery.clone());
            list.len() - 1
        };
        let study = study.clone();
        let client = self.inner.http.clone();
        let policy = self.inner.config.webhook;
        let store = self.inner.store.clone();
        handle.spawn(async move {
            let done = deliver(&client, policy, delivery, |d| lock(&study.deliveries)[slot] = d.clone()).await;
            match done.status {
                DeliveryStatus::Delivered => {
                    tracing::info!(session = %done.session_id, attempts = done.attempts, "webhook delivered")
                }
                _ => tracing::warn!(
                    session = %done.session_id,
                    attempts = done.attempts,
                    error = done.last_error.as_deref().unwrap_or(""),
                    "webhook failed"
                ),
            }
            if let Some(store) = store {
                if let Err(e) = store.append_delivery(&study.id, &done) {
                    tracing::error!(error = %e, "could not record webhook delivery");
                }
            }
        });
    }

    pub fn submit_demographics(&self, session_id: &str, values: BTreeMap<String, Value>) -> Result<Step, ApiError> {
        let slot = self.session(session_id)?;
        let mut live = lock(&slot);
        let store = self.inner.store.clone();
        self.mutate(&mut live, |study, state, now| {
            study.engine.submit_demographics(state, &values, now)?;
            let mut ledger = lock(&study.ledger);
            ledger.open_session();
            study.engine.next_item(state, Some(&ledger), now)?;
            if let Some(store) = &store {
                store.save_ledger(&study.id, &ledger).map_err(io_error)?;
            }
            Ok(())
        })?;
        Ok(step_of(&live))
    }

    /// The outstanding item, issuing one if needed. Repeated calls return
    /// the same item until a response arrives.
    pub fn next(&self, session_id: &str) -> Result<Step, ApiError> {
        let slot = self.session(session_id)?;
        let mut live = lock(&slot);
        self.mutate(&mut live, |study, state, now| {
            if state.phase == Phase::Running && state.outstanding().is_none() {
                let ledger = lock(&study.ledger);
                study.engine.next_item(state, Some(&ledger), now)?;
            }
            Ok(())
        })?;
        Ok(step_of(&live))
    }

    /// Records a response and issues the next item as one step.
    pub fn respond(&self, session_id: &str, body: ResponseBody) -> Result<ProgressSnapshot, ApiError> {
        let slot = self.session(session_id)?;
        let mut live = lock(&slot);
        let store = self.inner.store.clone();
        let outstanding = |study: &Study, state: &SessionState| {
            state
                .outstanding()
                .map(|id| serde_json::to_value(item_view(study, state, id)).expect("views serialize"))
        };
        let estimate = self.mutate(&mut live, |study, state, now| {
            match state.phase {
                Phase::Running => {}
                Phase::Finished => {
                    return Err(ApiError::new(StatusCode::CONFLICT, "session_finished", "session has finished")
                        .with_details(json!({"result": result_pointer(&state.session_id)})))
                }
                _ => return Err(EngineError::WrongPhase { expected: Phase::Running, actual: state.phase }.into()),
            }
            let response = Response {
                item_id: body.item_id,
                value: body.value,
                latency_ms: body.latency_ms,
            };
            let mut ledger = lock(&study.ledger);
            let estimate = study
                .engine
                .submit_response(state, response, Some(&mut ledger), now)
                .map_err(|e| {
                    let conflict = matches!(e, EngineError::StaleItem { .. });
                    let mut err = ApiError::from(e);
                    if conflict {
                        err.details["outstanding"] = outstanding(study, state).unwrap_or(Value::Null);
                    }
                    err
                })?;
            study.engine.next_item(state, Some(&ledger), now)?;
            if let Some(store) = &store {
                store.save_ledger(&study.id, &ledger).map_err(io_error)?;
            }
            Ok(estimate)
        })?;

        let config = live.study.engine.config();
        let completed = live.state.responses.len();
        Ok(ProgressSnapshot {
            items_completed: completed,
            max_items: config.max_items,
            progress: completed as f64 / config.max_items as f64,
            finished: is_closed(live.state.phase),
            theta: config.expose_theta.then_some(estimate.theta),
            se: (config.expose_se || config.expose_theta).then_some(estimate.se),
            next: step_of(&live),
        })
    }

    /// The rendered result. Operators holding the study token always get the
    /// full document; examinees get it only when the study exposes theta.
    pub fn result(&self, session_id: &str, bearer: Option<&str>) -> Result<String, ApiError> {
        let slot = self.session(session_id)?;
        let mut live = lock(&slot);
        // expiry is a state change like any other
        let _ = self.mutate(&mut live, |_, _, _| Ok(()));
        let Some(rendered) = &live.result else {
            return Err(ApiError::new(StatusCode::CONFLICT, "not_finished", "session has not finished")
                .with_details(json!({"phase": live.state.phase})));
        };
        Ok(if live.study.authorized(bearer) {
            rendered.full.clone()
        } else {
            rendered.examinee.clone()
        })
    }

    pub fn study_summary(&self, study_id: &str, bearer: Option<&str>) -> Result<StudySummary, ApiError> {
        let study = self.operator(study_id, bearer)?;
        let mut sessions = BTreeMap::new();
        for slot in self.sessions_of(&study) {
            *sessions.entry(lock(&slot).state.phase.to_string()).or_insert(0) += 1;
        }
        let exposure = {
            let ledger = lock(&study.ledger);
            let rates = ledger.rates();
            ExposureView {
                sessions: ledger.sessions_total(),
                max_rate: ledger.max_rate(),
                mean_rate: rates.values().sum::<f64>() / rates.len().max(1) as f64,
            }
        };
        let webhooks = lock(&study.deliveries).clone();
        Ok(StudySummary {
            study_id: study.id.clone(),
            bank: study.bank_info(),
            config: study.engine.config().clone(),
            created_ms: study.created_ms,
            sessions,
            exposure,
            webhooks,
        })
    }

    /// Full results of every closed session in the study.
    pub fn study_results(&self, study_id: &str, bearer: Option<&str>) -> Result<Vec<Value>, ApiError> {
        let study = self.operator(study_id, bearer)?;
        let mut out: Vec<Value> = self
            .sessions_of(&study)
            .iter()
            .filter_map(|slot| {
                let live = lock(slot);
                live.result.as_ref().and_then(|r| serde_json::from_str(&r.full).ok())
            })
            .collect();
        out.sort_by_key(|v| v["started_ms"].as_u64());
        Ok(out)
    }

    pub fn deliveries(&self, study_id: &str) -> Vec<WebhookDelivery> {
        self.study(study_id)
            .map(|s| lock(&s.deliveries).clone())
            .unwrap_or_default()
    }

    /// Client metadata recorded at session creation.
    pub fn client_meta(&self, session_id: &str) -> Result<ClientMeta, ApiError> {
        let slot = self.session(session_id)?;
        let meta = lock(&slot).client.clone();
        Ok(meta)
    }

    fn sessions_of(&self, study: &Study) -> Vec<Arc<Mutex<Live>>> {
        let sessions = self.inner.sessions.read().unwrap_or_else(|p| p.into_inner());
        sessions
            .values()
            .filter(|slot| lock(slot).study.id == study.id)
            .cloned()
            .collect()
    }

    pub fn health(&self) -> Health {
        Health {
            status: "ok".into(),
            studies: self.inner.studies.read().map_or(0, |s| s.len()),
            sessions: self.inner.sessions.read().map_or(0, |s| s.len()),
            persistent: self.inner.store.is_some(),
            restored_sessions: self.inner.restored,
        }
    }
}

fn expired(session_id: &str) -> ApiError {
    ApiError::new(StatusCode::GONE, "session_expired", "session expired after inactivity")
        .with_details(json!({"result": result_pointer(session_id)}))
}

fn item_view(study: &Study, state: &SessionState, id: &str) -> ItemView {
    let item = study.engine.item(id).expect("issued items come from the bank");
    let categories = item.n_categories();
    ItemView {
        item_id: item.id.clone(),
        position: state.administered.len(),
        model: item.model,
        categories,
        text: item.text.clone(),
        group: item.group.clone(),
        response_schema: ResponseSchema {
            kind: "integer".into(),
            minimum: 0,
            maximum: categories as u32 - 1,
        },
    }
}

fn step_of(live: &Live) -> Step {
    let state = &live.state;
    let study = &live.study;
    match state.phase {
        Phase::Demographics => Step::Demographics {
            fields: study.engine.config().demographics.clone().unwrap_or_default(),
        },
        Phase::Running | Phase::Created => {
            let id = state.outstanding().expect("running sessions always hold an item");
            let max_items = study.engine.config().max_items;
            let done = state.responses.len();
            Step::Item {
                item: item_view(study, state, id),
                progress: Progress {
                    items_completed: done,
                    max_items,
                    fraction: done as f64 / max_items as f64,
                },
            }
        }
        Phase::Finished | Phase::Expired => Step::Finished {
            stop_reason: state.stop.as_ref().map(|s| s.reason),
            result: result_pointer(&state.session_id),
        },
    }
}

impl Step {
    pub fn item_id(&self) -> Option<&str> {
        match self {
            Step::Item { item, .. } => Some(&item.item_id),
            _ => None,
        }
    }
}
