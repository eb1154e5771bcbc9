use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bank::ItemBank;
use crate::estimate::{EstimationConfig, Estimator};
use crate::irt::Model;
use crate::select::{Criterion, SelectionWeights, ShFormula};

pub const DEFAULT_SESSION_TIMEOUT_SECS: u64 = 30 * 60;

/// Full testing policy of a study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub name: String,
    pub model: Model,
    #[serde(default)]
    pub estimation: EstimationConfig,
    #[serde(default = "default_criterion")]
    pub criterion: Criterion,
    pub max_items: usize,
    pub min_items: usize,
    pub min_sem: f64,
    /// Responses collected with the warm-start rule before adaptive
    /// selection engages.
    #[serde(default)]
    pub adaptive_start: usize,
    /// Draw uniformly among the top-k candidates instead of taking the best.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub randomesque: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exposure: Option<ExposureConfig>,
    #[serde(default)]
    pub weights: SelectionWeights,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_targets: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cutoffs: Option<Vec<Band>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demographics: Option<Vec<DemographicField>>,
    #[serde(default = "yes")]
    pub session_save: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub results_webhook: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_language")]
    pub language: String,
    #[serde(default = "default_timeout")]
    pub session_timeout_secs: u64,
    /// Research studies may show the running estimate to the examinee.
    #[serde(default)]
    pub expose_theta: bool,
    #[serde(default)]
    pub expose_se: bool,
}

fn default_criterion() -> Criterion {
    Criterion::Mfi
}
fn yes() -> bool {
    true
}
fn default_language() -> String {
    "en".to_string()
}
fn default_timeout() -> u64 {
    DEFAULT_SESSION_TIMEOUT_SECS
}

impl StudyConfig {
    /// A fixed-policy MFI/EAP study with no optional features.
    pub fn new(name: impl Into<String>, model: Model, min_items: usize, max_items: usize, min_sem: f64) -> Self {
        StudyConfig {
            name: name.into(),
            model,
            estimation: EstimationConfig::default(),
            criterion: Criterion::Mfi,
            max_items,
            min_items,
            min_sem,
            adaptive_start: 0,
            randomesque: None,
            exposure: None,
            weights: SelectionWeights::default(),
            group_targets: None,
            cutoffs: None,
            demographics: None,
            session_save: true,
            results_webhook: None,
            seed: None,
            language: default_language(),
            session_timeout_secs: DEFAULT_SESSION_TIMEOUT_SECS,
            expose_theta: false,
            expose_se: false,
        }
    }

    pub fn exposure_enabled(&self) -> bool {
        self.exposure.as_ref().is_some_and(|e| e.enabled)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    /// Target rate applied to every item without an explicit entry.
    #[serde(default = "default_exposure_target")]
    pub target: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub targets: BTreeMap<String, f64>,
    #[serde(default)]
    pub formula: ShFormula,
}

fn default_exposure_target() -> f64 {
    0.25
}

impl ExposureConfig {
    pub fn uniform(target: f64) -> Self {
        ExposureConfig {
            enabled: true,
            target,
            targets: BTreeMap::new(),
            formula: ShFormula::Standard,
        }
    }
}

/// Classification band `[lower, upper)`; a missing bound is infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub label: String,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

impl Band {
    pub fn new(label: impl Into<String>, lower: Option<f64>, upper: Option<f64>) -> Self {
        Band {
            label: label.into(),
            lower,
            upper,
        }
    }

    pub fn contains(&self, theta: f64) -> bool {
        self.lower.is_none_or(|lo| theta >= lo) && self.upper.is_none_or(|hi| theta < hi)
    }
}

/// Label of the band containing `theta`.
pub fn classify(bands: &[Band], theta: f64) -> Option<&str> {
    bands
        .iter()
        .find(|b| b.contains(theta))
        .map(|b| b.label.as_str())
}

/// Problems with a band list; empty when the bands partition the real line.
pub fn band_problems(bands: &[Band]) -> Vec<String> {
    let mut out = Vec::new();
    if bands.is_empty() {
        out.push("at least one band is required".to_string());
        return out;
    }
    if bands[0].lower.is_some() {
        out.push("the first band must be unbounded below".to_string());
    }
    if bands[bands.len() - 1].upper.is_some() {
        out.push("the last band must be unbounded above".to_string());
    }
    for b in bands {
        if let (Some(lo), Some(hi)) = (b.lower, b.upper) {
            if !(lo < hi) {
                out.push(format!("band {:?} is empty: [{lo}, {hi})", b.label));
            }
        }
    }
    for w in bands.windows(2) {
        match (w[0].upper, w[1].lower) {
            (Some(hi), Some(lo)) if hi == lo => {}
            _ => out.push(format!(
                "bands {:?} and {:?} must share a boundary",
                w[0].label, w[1].label
            )),
        }
    }
    let labels: BTreeSet<&str> = bands.iter().map(|b| b.label.as_str()).collect();
    if labels.len() != bands.len() {
        out.push("band labels must be unique".to_string());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemographicField {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(flatten)]
    pub kind: FieldKind,
    #[serde(default = "yes")]
    pub required: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum FieldKind {
    Integer {
        #[serde(default)]
        min: Option<i64>,
        #[serde(default)]
        max: Option<i64>,
    },
    Text {
        #[serde(default)]
        max_len: Option<usize>,
    },
    Choice {
        options: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

/// Checks a demographics payload against the configured fields and returns
/// the normalized values.
pub fn validate_demographics(
    fields: &[DemographicField],
    payload: &BTreeMap<String, Value>,
) -> Result<BTreeMap<String, Value>, Vec<FieldError>> {
    let mut errors = Vec::new();
    let mut clean = BTreeMap::new();
    let err = |f: &str, m: String| FieldError {
        field: f.to_string(),
        message: m,
    };
    for key in payload.keys() {
        if !fields.iter().any(|f| &f.name == key) {
            errors.push(err(key, "unknown field".into()));
        }
    }
    for field in fields {
        let value = payload.get(&field.name).filter(|v| !v.is_null());
        let Some(value) = value else {
            if field.required {
                errors.push(err(&field.name, "required".into()));
            }
            continue;
        };
        match &field.kind {
            FieldKind::Integer { min, max } => {
                let parsed = match value {
                    Value::Number(n) => n.as_i64(),
                    Value::String(s) => s.trim().parse::<i64>().ok(),
                    _ => None,
                };
                match parsed {
                    None => errors.push(err(&field.name, format!("expected an integer, got {value}"))),
                    Some(n) if min.is_some_and(|m| n < m) || max.is_some_and(|m| n > m) => {
                        errors.push(err(&field.name, format!("{n} is out of range")))
                    }
                    Some(n) => {
                        clean.insert(field.name.clone(), Value::from(n));
                    }
                }
            }
            FieldKind::Text { max_len } => match value.as_str() {
                Some(s) if max_len.is_some_and(|m| s.chars().count() > m) => {
                    errors.push(err(&field.name, "text too long".into()))
                }
                Some(s) => {
                    clean.insert(field.name.clone(), Value::from(s));
                }
                None => errors.push(err(&field.name, "expected text".into())),
            },
            FieldKind::Choice { options } => match value.as_str() {
                Some(s) if options.iter().any(|o| o == s) => {
                    clean.insert(field.name.clone(), Value::from(s));
                }
                _ => errors.push(err(&field.name, format!("must be one of {options:?}"))),
            },
        }
    }
    if errors.is_empty() {
        Ok(clean)
    } else {
        Err(errors)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigViolation {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for ConfigViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Checks the config invariants, and cross-checks against `bank` when one is
/// supplied. Violations are returned as data.
pub fn validate_config(config: &StudyConfig, bank: Option<&ItemBank>) -> Vec<ConfigViolation> {
    let mut out = Vec::new();
    let mut push = |field: &str, message: String| {
        out.push(ConfigViolation {
            field: field.to_string(),
            message,
        })
    };

    if config.name.trim().is_empty() {
        push("name", "must be non-empty".into());
    }
    if config.min_items == 0 {
        push("min_items", "must be at least 1".into());
    }
    if config.max_items == 0 {
        push("max_items", "must be at least 1".into());
    }
    if config.min_items > config.max_items {
        push(
            "min_items",
            format!("min_items {} exceeds max_items {}", config.min_items, config.max_items),
        );
    }
    if !(config.min_sem > 0.0) || config.min_sem.is_nan() {
        push("min_sem", format!("must be positive, got {}", config.min_sem));
    }
    if config.adaptive_start > config.max_items {
        push(
            "adaptive_start",
            format!("adaptive_start {} exceeds max_items {}", config.adaptive_start, config.max_items),
        );
    }
    if config.randomesque == Some(0) {
        push("randomesque", "top-k must be at least 1".into());
    }
    if config.session_timeout_secs == 0 {
        push("session_timeout_secs", "must be positive".into());
    }
    if let Err(e) = Estimator::new(config.estimation.clone()) {
        push("estimation", e.to_string());
    }
    let b = config.estimation.bounds;
    if !(b.lo < b.hi) {
        push("estimation.bounds", "lo must be below hi".into());
    }
    if config.weights.validate().is_err() {
        push("weights", "weights must be non-negative with one positive; external scores in [0, 1]".into());
    }
    if let Some(exp) = &config.exposure {
        let bad = |t: f64| !(t > 0.0 && t <= 1.0);
        if bad(exp.target) || exp.targets.values().any(|t| bad(*t)) {
            push("exposure", "targets must lie in (0, 1]".into());
        }
    }
    if let Some(targets) = &config.group_targets {
        if targets.values().any(|t| !(0.0..=1.0).contains(t)) {
            push("group_targets", "shares must lie in [0, 1]".into());
        }
        let total: f64 = targets.values().sum();
        if total > 1.0 + 1e-9 {
            push("group_targets", format!("shares sum to {total}, above 1"));
        }
    }
    if let Some(bands) = &config.cutoffs {
        for p in band_problems(bands) {
            push("cutoffs", p);
        }
    }
    if let Some(fields) = &config.demographics {
        let names: BTreeSet<&str> = fields.iter().map(|f| f.name.as_str()).collect();
        if names.len() != fields.len() {
            push("demographics", "field names must be unique".into());
        }
        for f in fields {
            if let FieldKind::Choice { options } = &f.kind {
                if options.is_empty() {
                    push("demographics", format!("choice field {} has no options", f.name));
                }
            }
        }
    }
    if let Some(url) = &config.results_webhook {
        if !(url.starts_with("http://") || url.starts_with("https://")) {
            push("results_webhook", format!("{url:?} is not an http(s) URL"));
        }
    }

    if let Some(bank) = bank {
        if bank.model != config.model {
            push(
                "model",
                format!("study model {} does not match bank model {}", config.model, bank.model),
            );
        }
        if config.max_items > bank.len() {
            push(
                "max_items",
                format!("max_items {} exceeds the bank size {}", config.max_items, bank.len()),
            );
        }
        let groups = bank.groups();
        if let Some(targets) = &config.group_targets {
            for g in targets.keys().filter(|g| !groups.contains_key(*g)) {
                push("group_targets", format!("group {g:?} does not exist in the bank"));
            }
        }
        if let Some(exp) = &config.exposure {
            for id in exp.targets.keys().filter(|id| bank.get(id).is_none()) {
                push("exposure", format!("item {id:?} does not exist in the bank"));
            }
        }
        for id in config
            .weights
            .external_scores
            .keys()
            .filter(|id| bank.get(id).is_none())
        {
            push("weights.external_scores", format!("item {id:?} does not exist in the bank"));
        }
    }
    out
}
