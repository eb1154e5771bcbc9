//! The adaptive session state machine.
//!
//! A session moves `Created -> [Demographics ->] Running -> Finished`, or to
//! `Expired` from any live phase once it has been idle past the study's
//! timeout. While running, the caller alternates [`Engine::next_item`] and
//! [`Engine::submit_response`] until `next_item` returns a stop decision,
//! then assembles the outcome with [`Engine::finalize`].
//!
//! All randomness comes from the session's own seeded generator, and every
//! operation takes the wall-clock time as an argument, so replaying the same
//! calls reproduces a session bit for bit.

mod config;

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use config::{
    band_problems, classify, validate_config, validate_demographics, Band, ConfigViolation,
    DemographicField, ExposureConfig, FieldError, FieldKind, StudyConfig,
    DEFAULT_SESSION_TIMEOUT_SECS,
};

use crate::bank::ItemBank;
use crate::estimate::{AbilityEstimate, EstimateError, Estimator, Method};
use crate::irt::{information_unchecked, Item, Response, ScoredPattern};
use crate::select::{
    self, constrained_score, precision_score, rank, randomesque, sympson_hetter_filter,
    ConstraintContext, ContentBalance, Criterion, ExposureLedger,
};

/// Candidate pool size of the warm-start rule.
pub const WARM_START_TOP_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("invalid study configuration: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidConfig(Vec<ConfigViolation>),
    #[error("operation requires phase {expected}, session is {actual}")]
    WrongPhase { expected: Phase, actual: Phase },
    #[error("no item is outstanding")]
    NoOutstandingItem,
    #[error("response is for item {got}, outstanding item is {expected}")]
    StaleItem { expected: String, got: String },
    #[error("response {value} is outside the {categories} categories of item {item}")]
    ResponseOutOfRange {
        item: String,
        value: u32,
        categories: usize,
    },
    #[error("item {0} is not in the bank")]
    UnknownItem(String),
    #[error("session has not stopped yet")]
    NotFinished,
    #[error("demographics rejected")]
    Demographics(Vec<FieldError>),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Created,
    Demographics,
    Running,
    Finished,
    Expired,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StopReason {
    #[serde(rename = "SEM_REACHED")]
    SemReached,
    #[serde(rename = "MAX_ITEMS")]
    MaxItems,
    #[serde(rename = "POOL_EXHAUSTED")]
    PoolExhausted,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::SemReached => "SEM_REACHED",
            StopReason::MaxItems => "MAX_ITEMS",
            StopReason::PoolExhausted => "POOL_EXHAUSTED",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop(StopReason),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NextStep {
    Item(String),
    Stop(StopReason),
}

/// One entry of the ability trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    #[serde(flatten)]
    pub estimate: AbilityEstimate,
    /// Estimator differs from the previous step's.
    #[serde(default)]
    pub switched: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopRecord {
    pub reason: StopReason,
    pub at_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// The per-session random stream. Two streams compare equal when they share
/// seed, stream id and word position, whatever their buffered block holds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionRng(pub ChaCha8Rng);

impl SessionRng {
    pub fn seed_from_u64(seed: u64) -> Self {
        SessionRng(ChaCha8Rng::seed_from_u64(seed))
    }
}

impl PartialEq for SessionRng {
    fn eq(&self, other: &Self) -> bool {
        self.0.get_seed() == other.0.get_seed()
            && self.0.get_stream() == other.0.get_stream()
            && self.0.get_word_pos() == other.0.get_word_pos()
    }
}

impl RngCore for SessionRng {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}

/// One examinee's administration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub phase: Phase,
    pub seed: u64,
    pub bank_fingerprint: String,
    pub administered: Vec<String>,
    pub responses: Vec<Response>,
    pub trajectory: Vec<TrajectoryPoint>,
    pub rng: SessionRng,
    pub created_ms: u64,
    pub last_activity_ms: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub demographics: BTreeMap<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<StopRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expired_ms: Option<u64>,
    /// Items offered to the exposure filter while choosing the outstanding
    /// item; flushed into the ledger with the response.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pending_offers: Vec<String>,
    /// Items the exposure filter turned down; they stay out of this session.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub set_aside: Vec<String>,
}

impl SessionState {
    /// The administered item still awaiting a response.
    pub fn outstanding(&self) -> Option<&str> {
        (self.administered.len() == self.responses.len() + 1)
            .then(|| self.administered.last().map(String::as_str))
            .flatten()
    }

    pub fn current_estimate(&self) -> Option<&AbilityEstimate> {
        self.trajectory.last().map(|p| &p.estimate)
    }

    /// Position of the session generator, in 32-bit words.
    pub fn rng_position(&self) -> u128 {
        self.rng.0.get_word_pos()
    }

    fn require(&self, expected: Phase) -> Result<(), EngineError> {
        if self.phase == expected {
            Ok(())
        } else {
            Err(EngineError::WrongPhase {
                expected,
                actual: self.phase,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Disposition {
    Completed,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    pub response: u32,
    pub theta: f64,
    pub se: f64,
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
}

/// Outcome of a stopped or expired session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionResult {
    pub session_id: String,
    pub disposition: Disposition,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_reason: Option<StopReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_estimate: Option<AbilityEstimate>,
    pub items_administered: usize,
    pub records: Vec<ItemRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification: Option<String>,
    pub started_ms: u64,
    pub ended_ms: u64,
    pub duration_ms: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub demographics: BTreeMap<String, Value>,
}

/// A study's configuration bound to its bank, with derived lookup tables.
#[derive(Debug, Clone)]
pub struct Engine {
    config: StudyConfig,
    bank: ItemBank,
    estimator: Estimator,
    index: HashMap<String, usize>,
    fingerprint: String,
}

impl Engine {
    /// Validates `config` against `bank` and binds them.
    pub fn new(config: StudyConfig, bank: ItemBank) -> Result<Self, EngineError> {
        let violations = validate_config(&config, Some(&bank));
        if !violations.is_empty() {
            return Err(EngineError::InvalidConfig(violations));
        }
        let estimator = Estimator::new(config.estimation.clone())?;
        let index = bank
            .items
            .iter()
            .enumerate()
            .map(|(i, it)| (it.id.clone(), i))
            .collect();
        let fingerprint = bank.fingerprint();
        Ok(Engine {
            config,
            bank,
            estimator,
            index,
            fingerprint,
        })
    }

    pub fn config(&self) -> &StudyConfig {
        &self.config
    }

    pub fn bank(&self) -> &ItemBank {
        &self.bank
    }

    pub fn bank_fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn item(&self, id: &str) -> Option<&Item> {
        self.index.get(id).map(|&i| &self.bank.items[i])
    }

    /// A ledger over this bank carrying the study's exposure targets.
    pub fn new_ledger(&self) -> ExposureLedger {
        let exp = self.config.exposure.as_ref();
        let mut ledger = ExposureLedger::for_items(&self.bank.items, exp.map_or(1.0, |e| e.target));
        if let Some(exp) = exp {
            for (id, t) in &exp.targets {
                ledger = ledger.with_target(id.clone(), *t);
            }
        }
        ledger
    }

    fn pattern<'a>(&'a self, responses: &[Response]) -> Result<ScoredPattern<'a>, EngineError> {
        Ok(ScoredPattern::from_lookup(|id| self.item(id), responses).map_err(EstimateError::from)?)
    }

    /// The ability estimate the engine reports after `responses`: EAP while
    /// the warm start lasts, then the configured fallback chain.
    pub fn estimate(&self, responses: &[Response]) -> Result<AbilityEstimate, EngineError> {
        let pattern = self.pattern(responses)?;
        Ok(if responses.len() <= self.config.adaptive_start {
            self.estimator.run(Method::Eap, &pattern)?
        } else {
            self.estimator.fallback_chain(&pattern)
        })
    }

    /// A fresh session. It starts in `Demographics` when the study collects
    /// demographics and in `Created` otherwise.
    pub fn start_session(&self, session_id: impl Into<String>, seed: u64, now_ms: u64) -> SessionState {
        let phase = if self.config.demographics.as_ref().is_some_and(|f| !f.is_empty()) {
            Phase::Demographics
        } else {
            Phase::Created
        };
        SessionState {
            session_id: session_id.into(),
            phase,
            seed,
            bank_fingerprint: self.fingerprint.clone(),
            administered: Vec::new(),
            responses: Vec::new(),
            trajectory: Vec::new(),
            rng: SessionRng::seed_from_u64(seed),
            created_ms: now_ms,
            last_activity_ms: now_ms,
            demographics: BTreeMap::new(),
            stop: None,
            expired_ms: None,
            pending_offers: Vec::new(),
            set_aside: Vec::new(),
        }
    }

    /// `Created -> Running`.
    pub fn begin(&self, state: &mut SessionState, now_ms: u64) -> Result<(), EngineError> {
        state.require(Phase::Created)?;
        state.phase = Phase::Running;
        state.last_activity_ms = now_ms;
        Ok(())
    }

    /// `Demographics -> Running` once the payload passes validation.
    pub fn submit_demographics(
        &self,
        state: &mut SessionState,
        payload: &BTreeMap<String, Value>,
        now_ms: u64,
    ) -> Result<(), EngineError> {
        state.require(Phase::Demographics)?;
        let fields = self.config.demographics.as_deref().unwrap_or(&[]);
        let clean = validate_demographics(fields, payload).map_err(EngineError::Demographics)?;
        state.demographics = clean;
        state.phase = Phase::Running;
        state.last_activity_ms = now_ms;
        Ok(())
    }

    /// Applies the stopping rules. `SEM_REACHED` takes precedence over
    /// `MAX_ITEMS` when both hold.
    pub fn stop_check(&self, state: &SessionState) -> StopDecision {
        stop_check(state, &self.config)
    }

    /// Chooses the next item, or decides to stop. Repeated calls while an
    /// item is outstanding return that item.
    pub fn next_item(
        &self,
        state: &mut SessionState,
        ledger: Option<&ExposureLedger>,
        now_ms: u64,
    ) -> Result<NextStep, EngineError> {
        state.require(Phase::Running)?;
        if let Some(out) = state.outstanding() {
            return Ok(NextStep::Item(out.to_string()));
        }
        if let StopDecision::Stop(reason) = self.stop_check(state) {
            self.stop(state, reason, None, now_ms);
            return Ok(NextStep::Stop(reason));
        }
        let pool = select::remaining(&self.bank.items, &state.administered);
        if pool.is_empty() {
            let n = state.responses.len();
            let warning = (n < self.config.min_items).then(|| {
                format!(
                    "item pool exhausted after {n} responses, before min_items {}",
                    self.config.min_items
                )
            });
            self.stop(state, StopReason::PoolExhausted, warning, now_ms);
            return Ok(NextStep::Stop(StopReason::PoolExhausted));
        }

        let chosen = if state.responses.len() < self.config.adaptive_start {
            self.warm_start_pick(&pool, state, ledger)
        } else {
            self.adaptive_pick(&pool, state, ledger)
        };
        let id = chosen.id.clone();
        state.administered.push(id.clone());
        state.last_activity_ms = now_ms;
        Ok(NextStep::Item(id))
    }

    fn warm_start_pick<'a>(
        &self,
        pool: &[&'a Item],
        state: &mut SessionState,
        ledger: Option<&ExposureLedger>,
    ) -> &'a Item {
        let center = self.config.estimation.prior.mean;
        let ranked = rank(pool, |it| -(it.location() - center).abs());
        self.draw(&ranked, WARM_START_TOP_K, state, ledger)
    }

    fn adaptive_pick<'a>(
        &self,
        pool: &[&'a Item],
        state: &mut SessionState,
        ledger: Option<&ExposureLedger>,
    ) -> &'a Item {
        let prior = self.config.estimation.prior;
        let estimate = state.current_estimate().copied().unwrap_or(AbilityEstimate {
            theta: prior.mean,
            se: prior.sd,
            method: Method::Eap,
            converged: true,
            iterations: 0,
        });
        let ranked = match self.config.criterion {
            Criterion::Mfi => rank(pool, |it| information_unchecked(it, estimate.theta)),
            Criterion::MfiPrecision => rank(pool, |it| {
                precision_score(information_unchecked(it, estimate.theta), &estimate)
            }),
            Criterion::Constrained => {
                let balance = self.config.group_targets.as_ref().map(|t| {
                    ContentBalance::from_administered(
                        t,
                        state.administered.iter().filter_map(|id| self.item(id)),
                    )
                });
                let ctx = ConstraintContext {
                    weights: &self.config.weights,
                    ledger,
                    content: balance.as_ref(),
                };
                rank(pool, |it| constrained_score(it, &estimate, &ctx))
            }
        };
        let top_k = self.config.randomesque.unwrap_or(1);
        self.draw(&ranked, top_k, state, ledger)
    }

    /// Draws uniformly among the leading `top_k` ranked items. Under exposure
    /// control each draw must also pass the Sympson-Hetter filter; rejected
    /// items leave the candidate list and the next one moves up.
    fn draw<'a>(
        &self,
        ranked: &[(&'a Item, f64)],
        top_k: usize,
        state: &mut SessionState,
        ledger: Option<&ExposureLedger>,
    ) -> &'a Item {
        let exposure = self.config.exposure.as_ref().filter(|e| e.enabled);
        match (exposure, ledger) {
            (Some(exp), Some(ledger)) => {
                let mut candidates: Vec<_> = ranked
                    .iter()
                    .filter(|(it, _)| !state.set_aside.contains(&it.id))
                    .copied()
                    .collect();
                while !candidates.is_empty() {
                    let n = candidates.len().min(top_k.max(1));
                    let pick = if n == 1 {
                        0
                    } else {
                        rand::Rng::random_range(&mut state.rng, 0..n)
                    };
                    let item = candidates[pick].0;
                    state.pending_offers.push(item.id.clone());
                    if sympson_hetter_filter(&item.id, ledger, exp.formula, &mut state.rng) {
                        return item;
                    }
                    state.set_aside.push(item.id.clone());
                    candidates.remove(pick);
                }
                ranked[0].0
            }
            _ if top_k > 1 => randomesque(ranked, top_k, &mut state.rng).expect("pool is non-empty"),
            _ => ranked[0].0,
        }
    }

    fn stop(&self, state: &mut SessionState, reason: StopReason, warning: Option<String>, now_ms: u64) {
        state.phase = Phase::Finished;
        state.stop = Some(StopRecord {
            reason,
            at_ms: now_ms,
            warning,
        });
        state.last_activity_ms = now_ms;
    }

    /// Records the response to the outstanding item and re-estimates ability
    /// over the full response set.
    pub fn submit_response(
        &self,
        state: &mut SessionState,
        response: Response,
        ledger: Option<&mut ExposureLedger>,
        now_ms: u64,
    ) -> Result<AbilityEstimate, EngineError> {
        state.require(Phase::Running)?;
        let expected = state.outstanding().ok_or(EngineError::NoOutstandingItem)?;
        if response.item_id != expected {
            return Err(EngineError::StaleItem {
                expected: expected.to_string(),
                got: response.item_id,
            });
        }
        let item = self
            .item(&response.item_id)
            .ok_or_else(|| EngineError::UnknownItem(response.item_id.clone()))?;
        if response.value as usize >= item.n_categories() {
            return Err(EngineError::ResponseOutOfRange {
                item: item.id.clone(),
                value: response.value,
                categories: item.n_categories(),
            });
        }

        let mut responses = state.responses.clone();
        responses.push(response);
        let estimate = self.estimate(&responses)?;
        let switched = state
            .current_estimate()
            .is_some_and(|prev| prev.method != estimate.method);

        if let Some(ledger) = ledger {
            for id in &state.pending_offers {
                ledger
                    .record_selection(id)
                    .map_err(|_| EngineError::UnknownItem(id.clone()))?;
            }
            ledger
                .record_administration(&item.id)
                .map_err(|_| EngineError::UnknownItem(item.id.clone()))?;
        }
        state.pending_offers.clear();
        state.responses = responses;
        state.trajectory.push(TrajectoryPoint { estimate, switched });
        state.last_activity_ms = now_ms;
        Ok(estimate)
    }

    /// Moves an idle live session to `Expired`. Returns whether it expired.
    pub fn expire_if_idle(&self, state: &mut SessionState, now_ms: u64) -> bool {
        let live = matches!(state.phase, Phase::Created | Phase::Demographics | Phase::Running);
        let idle = now_ms.saturating_sub(state.last_activity_ms);
        if live && idle > self.config.session_timeout_secs.saturating_mul(1000) {
            state.phase = Phase::Expired;
            state.expired_ms = Some(now_ms);
            true
        } else {
            false
        }
    }

    /// Assembles the outcome of a finished or expired session.
    pub fn finalize(&self, state: &SessionState) -> Result<SessionResult, EngineError> {
        let (disposition, ended_ms) = match (state.phase, &state.stop, state.expired_ms) {
            (Phase::Finished, Some(stop), _) => (Disposition::Completed, stop.at_ms),
            (Phase::Expired, _, Some(at)) => (Disposition::Expired, at),
            _ => return Err(EngineError::NotFinished),
        };
        let records = state
            .responses
            .iter()
            .zip(&state.trajectory)
            .map(|(r, p)| ItemRecord {
                item_id: r.item_id.clone(),
                response: r.value,
                theta: p.estimate.theta,
                se: p.estimate.se,
                method: p.estimate.method,
                latency_ms: r.latency_ms,
            })
            .collect();
        let final_estimate = state.current_estimate().copied();
        let classification = match (&self.config.cutoffs, final_estimate) {
            (Some(bands), Some(est)) => classify(bands, est.theta).map(str::to_string),
            _ => None,
        };
        let warnings = state
            .stop
            .as_ref()
            .and_then(|s| s.warning.clone())
            .into_iter()
            .collect();
        Ok(SessionResult {
            session_id: state.session_id.clone(),
            disposition,
            stop_reason: state.stop.as_ref().map(|s| s.reason),
            final_estimate,
            items_administered: state.responses.len(),
            records,
            classification,
            started_ms: state.created_ms,
            ended_ms,
            duration_ms: ended_ms.saturating_sub(state.created_ms),
            warnings,
            demographics: state.demographics.clone(),
        })
    }

    /// Reinstates an issued item without re-running selection. Used when
    /// replaying a log whose selections depended on cross-session exposure
    /// counts.
    pub fn restore_issued_item(
        &self,
        state: &mut SessionState,
        item_id: &str,
        offers: &[String],
        rng_position: u128,
        now_ms: u64,
    ) -> Result<(), EngineError> {
        state.require(Phase::Running)?;
        if state.outstanding().is_some() {
            return Err(EngineError::StaleItem {
                expected: state.outstanding().unwrap_or_default().to_string(),
                got: item_id.to_string(),
            });
        }
        if self.item(item_id).is_none() {
            return Err(EngineError::UnknownItem(item_id.to_string()));
        }
        state.administered.push(item_id.to_string());
        state.pending_offers = offers.to_vec();
        state.rng.0.set_word_pos(rng_position);
        state.last_activity_ms = now_ms;
        Ok(())
    }
}

/// Stopping rules over a session's response count and latest SE.
pub fn stop_check(state: &SessionState, config: &StudyConfig) -> StopDecision {
    let n = state.responses.len();
    let se = state.current_estimate().map_or(f64::INFINITY, |e| e.se);
    if n >= config.min_items && se <= config.min_sem {
        StopDecision::Stop(StopReason::SemReached)
    } else if n >= config.max_items {
        StopDecision::Stop(StopReason::MaxItems)
    } else {
        StopDecision::Continue
    }
}

#[cfg(test)]
mod tests;
