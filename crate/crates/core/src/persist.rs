//! Session persistence: versioned JSON snapshots, an append-only event log
//! with deterministic replay, and signed resume tokens.

use std::collections::BTreeMap;

use hmac::{Hmac, KeyInit, Mac};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::Sha256;
use thiserror::Error;

use crate::engine::{Engine, EngineError, NextStep, Phase, SessionState, StopReason};
use crate::estimate::AbilityEstimate;
use crate::irt::Response;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("malformed document: {0}")]
    Format(#[from] serde_json::Error),
    #[error("unsupported schema version {found}, expected {SCHEMA_VERSION}")]
    Schema { found: u32 },
    #[error("invalid resume token")]
    InvalidToken,
    #[error("session {0} cannot be resumed in phase {1}")]
    NotResumable(String, Phase),
    #[error("snapshot belongs to a different bank")]
    BankMismatch,
    #[error("token is for session {token}, snapshot holds {snapshot}")]
    SessionMismatch { token: String, snapshot: String },
    #[error("event log must begin with a created event")]
    MissingCreated,
    #[error("replay diverged at event {index}: {message}")]
    Diverged { index: usize, message: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// A self-contained, versioned copy of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub schema_version: u32,
    pub state: SessionState,
}

impl Snapshot {
    pub fn new(state: SessionState) -> Self {
        Snapshot {
            schema_version: SCHEMA_VERSION,
            state,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("session state serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PersistError> {
        #[derive(Deserialize)]
        struct Header {
            schema_version: u32,
        }
        let header: Header = serde_json::from_str(text)?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(PersistError::Schema {
                found: header.schema_version,
            });
        }
        Ok(serde_json::from_str(text)?)
    }
}

/// One entry of a session's append-only log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SessionEvent {
    Created {
        session_id: String,
        seed: u64,
        bank_fingerprint: String,
        at_ms: u64,
    },
    Started {
        at_ms: u64,
    },
    Demographics {
        values: BTreeMap<String, Value>,
        at_ms: u64,
    },
    ItemIssued {
        item_id: String,
        #[serde(with = "decimal")]
        rng_position: u128,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        offers: Vec<String>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        set_aside: Vec<String>,
        at_ms: u64,
    },
    Response {
        response: Response,
        at_ms: u64,
    },
    Estimate {
        estimate: AbilityEstimate,
        switched: bool,
    },
    Stopped {
        reason: StopReason,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        warning: Option<String>,
        at_ms: u64,
    },
    Expired {
        at_ms: u64,
    },
}

impl SessionEvent {
    pub fn created(state: &SessionState) -> Self {
        SessionEvent::Created {
            session_id: state.session_id.clone(),
            seed: state.seed,
            bank_fingerprint: state.bank_fingerprint.clone(),
            at_ms: state.created_ms,
        }
    }
}

/// Events describing the transition from `before` to `after`, where `after`
/// results from a single engine call on `before`.
pub fn diff_events(before: &SessionState, after: &SessionState) -> Vec<SessionEvent> {
    let mut out = Vec::new();
    let entered_running = before.phase != Phase::Running && after.phase == Phase::Running;
    if entered_running {
        if before.phase == Phase::Demographics {
            out.push(SessionEvent::Demographics {
                values: after.demographics.clone(),
                at_ms: after.last_activity_ms,
            });
        } else {
            out.push(SessionEvent::Started {
                at_ms: after.last_activity_ms,
            });
        }
    }
    for (i, response) in after.responses.iter().enumerate().skip(before.responses.len()) {
        out.push(SessionEvent::Response {
            response: response.clone(),
            at_ms: after.last_activity_ms,
        });
        let point = &after.trajectory[i];
        out.push(SessionEvent::Estimate {
            estimate: point.estimate,
            switched: point.switched,
        });
    }
    if after.administered.len() > before.administered.len() {
        let item_id = after.administered.last().expect("grew").clone();
        out.push(SessionEvent::ItemIssued {
            item_id,
            rng_position: after.rng_position(),
            offers: after.pending_offers.clone(),
            set_aside: after.set_aside[before.set_aside.len().min(after.set_aside.len())..].to_vec(),
            at_ms: after.last_activity_ms,
        });
    }
    if before.stop.is_none() {
        if let Some(stop) = &after.stop {
            out.push(SessionEvent::Stopped {
                reason: stop.reason,
                warning: stop.warning.clone(),
                at_ms: stop.at_ms,
            });
        }
    }
    if before.expired_ms.is_none() {
        if let Some(at_ms) = after.expired_ms {
            out.push(SessionEvent::Expired { at_ms });
        }
    }
    out
}

/// How issued items are reconstructed during replay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayMode {
    /// Re-run selection and require the logged item. Only sound when
    /// selection does not read cross-session exposure counts.
    Reselect,
    /// Reinstate the logged item and random-stream position.
    Restore,
    /// `Reselect` unless the study uses exposure control.
    Auto,
}

/// Rebuilds a session from its log, checking every recorded estimate and
/// decision against a fresh computation.
pub fn replay(engine: &Engine, events: &[SessionEvent], mode: ReplayMode) -> Result<SessionState, PersistError> {
    let reselect = match mode {
        ReplayMode::Reselect => true,
        ReplayMode::Restore => false,
        ReplayMode::Auto => !engine.config().exposure_enabled(),
    };
    let (first, rest) = events.split_first().ok_or(PersistError::MissingCreated)?;
    let SessionEvent::Created {
        session_id,
        seed,
        bank_fingerprint,
        at_ms,
    } = first
    else {
        return Err(PersistError::MissingCreated);
    };
    if bank_fingerprint != engine.bank_fingerprint() {
        return Err(PersistError::BankMismatch);
    }
    let mut state = engine.start_session(session_id.clone(), *seed, *at_ms);

    for (offset, event) in rest.iter().enumerate() {
        let index = offset + 1;
        let diverged = |message: String| PersistError::Diverged { index, message };
        match event {
            SessionEvent::Created { .. } => return Err(diverged("duplicate created event".into())),
            SessionEvent::Started { at_ms } => engine.begin(&mut state, *at_ms)?,
            SessionEvent::Demographics { values, at_ms } => {
                engine.submit_demographics(&mut state, values, *at_ms)?
            }
            SessionEvent::ItemIssued {
                item_id,
                rng_position,
                offers,
                set_aside,
                at_ms,
            } => {
                if reselect {
                    match engine.next_item(&mut state, None, *at_ms)? {
                        NextStep::Item(id) if &id == item_id => {}
                        other => return Err(diverged(format!("expected item {item_id}, selection gave {other:?}"))),
                    }
                    if state.rng_position() != *rng_position {
                        return Err(diverged("random stream position differs".into()));
                    }
                } else {
                    engine.restore_issued_item(&mut state, item_id, offers, *rng_position, *at_ms)?;
                    state.set_aside.extend(set_aside.iter().cloned());
                }
            }
            SessionEvent::Response { response, at_ms } => {
                engine.submit_response(&mut state, response.clone(), None, *at_ms)?;
            }
            SessionEvent::Estimate { estimate, switched } => {
                let point = state
                    .trajectory
                    .last()
                    .ok_or_else(|| diverged("estimate without a response".into()))?;
                if !same_estimate(&point.estimate, estimate) || point.switched != *switched {
                    return Err(diverged(format!(
                        "estimate {:?} differs from logged {:?}",
                        point.estimate, estimate
                    )));
                }
            }
            SessionEvent::Stopped { reason, at_ms, .. } => match engine.next_item(&mut state, None, *at_ms)? {
                NextStep::Stop(r) if r == *reason => {}
                other => return Err(diverged(format!("expected stop {reason}, got {other:?}"))),
            },
            SessionEvent::Expired { at_ms } => {
                if !engine.expire_if_idle(&mut state, *at_ms) {
                    return Err(diverged("session was not idle at the logged expiry".into()));
                }
            }
        }
    }
    Ok(state)
}

mod decimal {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        String::deserialize(d)?.parse().map_err(D::Error::custom)
    }
}

fn same_estimate(a: &AbilityEstimate, b: &AbilityEstimate) -> bool {
    a.theta.to_bits() == b.theta.to_bits()
        && a.se.to_bits() == b.se.to_bits()
        && a.method == b.method
        && a.converged == b.converged
        && a.iterations == b.iterations
}

/// Encodes a log as JSON lines.
pub fn events_to_jsonl(events: &[SessionEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("events serialize"));
        out.push('\n');
    }
    out
}

pub fn events_from_jsonl(text: &str) -> Result<Vec<SessionEvent>, PersistError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(PersistError::from))
        .collect()
}

/// Signs and checks resume tokens of the form `<session_id>.<hex tag>`.
#[derive(Clone)]
pub struct TokenSigner {
    key: Vec<u8>,
}

impl std::fmt::Debug for TokenSigner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("TokenSigner(..)")
    }
}

type HmacSha256 = Hmac<Sha256>;

impl TokenSigner {
    pub fn new(key: impl Into<Vec<u8>>) -> Self {
        TokenSigner { key: key.into() }
    }

    fn mac(&self, session_id: &str) -> HmacSha256 {
        let mut mac = HmacSha256::new_from_slice(&self.key).expect("hmac takes any key length");
        mac.update(session_id.as_bytes());
        mac
    }

    pub fn issue(&self, session_id: &str) -> String {
        let tag = self.mac(session_id).finalize().into_bytes();
        format!("{session_id}.{}", hex::encode(tag))
    }

    /// Returns the session id carried by a genuine token.
    pub fn verify<'t>(&self, token: &'t str) -> Result<&'t str, PersistError> {
        let (id, tag) = token.rsplit_once('.').ok_or(PersistError::InvalidToken)?;
        let tag = hex::decode(tag).map_err(|_| PersistError::InvalidToken)?;
        self.mac(id)
            .verify_slice(&tag)
            .map_err(|_| PersistError::InvalidToken)?;
        Ok(id)
    }
}

/// Restores a live session from its snapshot after checking the token, the
/// bank and the phase.
pub fn resume(engine: &Engine, signer: &TokenSigner, token: &str, snapshot: &str) -> Result<SessionState, PersistError> {
    let id = signer.verify(token)?;
    let snap = Snapshot::from_json(snapshot)?;
    let state = snap.state;
    if state.session_id != id {
        return Err(PersistError::SessionMismatch {
            token: id.to_string(),
            snapshot: state.session_id,
        });
    }
    if state.bank_fingerprint != engine.bank_fingerprint() {
        return Err(PersistError::BankMismatch);
    }
    match state.phase {
        Phase::Created | Phase::Demographics | Phase::Running => Ok(state),
        other => Err(PersistError::NotResumable(state.session_id, other)),
    }
}
