//! Item response functions for the 1PL, 2PL, 3PL and graded response models.
//!
//! Everything here is on the pure logistic metric (no 1.7 scaling constant).
//! Probabilities are reported unclamped; only the log-likelihood floors them
//! at [`LOG_FLOOR`] so that `ln` stays finite.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper bound on the 3PL lower asymptote.
pub const MAX_GUESSING: f64 = 0.35;

/// Probability floor applied inside log-likelihood evaluation.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IrtError {
    #[error("theta must be finite, got {0}")]
    NonFiniteTheta(f64),
    #[error("item {item}: {reason}")]
    InvalidItem { item: String, reason: String },
    #[error("item {item}: category boundary {k} out of range 0..={max}")]
    BoundaryOutOfRange { item: String, k: usize, max: usize },
    #[error("item {item}: response {value} outside categories 0..{categories}")]
    ResponseOutOfRange {
        item: String,
        value: u32,
        categories: usize,
    },
    #[error("no item with id {0} among the supplied items")]
    UnknownItem(String),
    #[error("response set is empty")]
    EmptyResponses,
    #[error("cumulative probabilities are only defined for GRM items, {0} is {1}")]
    NotGraded(String, Model),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Model {
    #[serde(rename = "1PL")]
    OnePl,
    #[serde(rename = "2PL")]
    TwoPl,
    #[serde(rename = "3PL")]
    ThreePl,
    #[serde(rename = "GRM")]
    Grm,
}

impl Model {
    pub fn is_dichotomous(self) -> bool {
        !matches!(self, Model::Grm)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Model::OnePl => "1PL",
            Model::TwoPl => "2PL",
            Model::ThreePl => "3PL",
            Model::Grm => "GRM",
        }
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Model {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "1PL" | "RASCH" => Ok(Model::OnePl),
            "2PL" => Ok(Model::TwoPl),
            "3PL" => Ok(Model::ThreePl),
            "GRM" => Ok(Model::Grm),
            other => Err(format!("unknown model {other:?}")),
        }
    }
}

/// Calibrated parameters of one item.
///
/// Fields that do not apply to the item's model carry neutral values:
/// `a = 1` for 1PL, `c = 0` outside 3PL, `b` unused and `thresholds`
/// populated only for GRM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: String,
    pub model: Model,
    pub a: f64,
    #[serde(default)]
    pub b: f64,
    #[serde(default)]
    pub c: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub thresholds: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    /// Display text passed through to the examinee client.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl Item {
    pub fn one_pl(id: impl Into<String>, b: f64) -> Self {
        Item {
            id: id.into(),
            model: Model::OnePl,
            a: 1.0,
            b,
            c: 0.0,
            thresholds: Vec::new(),
            group: None,
            text: None,
        }
    }

    pub fn two_pl(id: impl Into<String>, a: f64, b: f64) -> Self {
        Item {
            model: Model::TwoPl,
            a,
            ..Item::one_pl(id, b)
        }
    }

    pub fn three_pl(id: impl Into<String>, a: f64, b: f64, c: f64) -> Self {
        Item {
            model: Model::ThreePl,
            a,
            c,
            ..Item::one_pl(id, b)
        }
    }

    pub fn grm(id: impl Into<String>, a: f64, thresholds: Vec<f64>) -> Self {
        Item {
            model: Model::Grm,
            a,
            b: 0.0,
            thresholds,
            ..Item::one_pl(id, 0.0)
        }
    }

    pub fn with_group(mut self, group: impl Into<String>) -> Self {
        self.group = Some(group.into());
        self
    }

    /// Number of ordered response categories (2 for dichotomous items).
    pub fn n_categories(&self) -> usize {
        match self.model {
            Model::Grm => self.thresholds.len() + 1,
            _ => 2,
        }
    }

    /// Location used by warm-start rules: `b` for dichotomous items, the
    /// mean threshold for GRM.
    pub fn location(&self) -> f64 {
        match self.model {
            Model::Grm if !self.thresholds.is_empty() => {
                self.thresholds.iter().sum::<f64>() / self.thresholds.len() as f64
            }
            _ => self.b,
        }
    }

    /// Checks the parameter invariants, returning every violated rule.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.id.trim().is_empty() {
            out.push("item_id must be non-empty".to_string());
        }
        if !(self.a.is_finite() && self.a > 0.0) {
            out.push(format!("discrimination a must be > 0, got {}", self.a));
        }
        if self.model == Model::OnePl && self.a != 1.0 {
            out.push(format!("1PL discrimination is fixed to 1.0, got {}", self.a));
        }
        if !self.b.is_finite() {
            out.push(format!("difficulty b must be finite, got {}", self.b));
        }
        match self.model {
            Model::ThreePl => {
                if !(0.0..=MAX_GUESSING).contains(&self.c) {
                    out.push(format!(
                        "guessing c must lie in [0, {MAX_GUESSING}], got {}",
                        self.c
                    ));
                }
            }
            _ => {
                if self.c != 0.0 {
                    out.push(format!(
                        "guessing c is only allowed for 3PL items, got {}",
                        self.c
                    ));
                }
            }
        }
        match self.model {
            Model::Grm => {
                if self.thresholds.is_empty() {
                    out.push("GRM items need at least one threshold".to_string());
                }
                if self.thresholds.iter().any(|t| !t.is_finite()) {
                    out.push("GRM thresholds must be finite".to_string());
                }
                if self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
                    out.push(format!(
                        "GRM thresholds must be strictly increasing, got {:?}",
                        self.thresholds
                    ));
                }
            }
            _ => {
                if !self.thresholds.is_empty() {
                    out.push(format!(
                        "thresholds are only allowed for GRM items ({} item)",
                        self.model
                    ));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), IrtError> {
        match self.violations().into_iter().next() {
            None => Ok(()),
            Some(reason) => Err(IrtError::InvalidItem {
                item: self.id.clone(),
                reason,
            }),
        }
    }
}

/// One scored answer. `value` is 0/1 for dichotomous items and the
/// category index for GRM items.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub item_id: String,
    pub value: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
}

impl Response {
    pub fn new(item_id: impl Into<String>, value: u32) -> Self {
        Response {
            item_id: item_id.into(),
            value,
            latency_ms: None,
        }
    }
}

/// Logistic function evaluated without exponentiating large positive
/// arguments.
#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_theta(theta: f64) -> Result<(), IrtError> {
    if theta.is_finite() {
        Ok(())
    } else {
        Err(IrtError::NonFiniteTheta(theta))
    }
}

/// Probability of a correct response for a dichotomous item, together with
/// its complement computed without cancellation.
#[inline]
fn dichotomous(item: &Item, theta: f64) -> (f64, f64) {
    let x = item.a * (theta - item.b);
    let c = if item.model == Model::ThreePl { item.c } else { 0.0 };
    let p = c + (1.0 - c) * logistic(x);
    let q = (1.0 - c) * logistic(-x);
    (p, q)
}

/// `P*_k(theta)` for `k` in `0..=m`, with the conventional 1 and 0 at the ends.
#[inline]
fn boundary(item: &Item, k: usize, theta: f64) -> f64 {
    let m = item.thresholds.len() + 1;
    if k == 0 {
        1.0
    } else if k >= m {
        0.0
    } else {
        logistic(item.a * (theta - item.thresholds[k - 1]))
    }
}

/// Logit of boundary `k`: `+inf` for `k = 0`, `-inf` past the last threshold.
#[inline]
fn boundary_logit(item: &Item, k: usize, theta: f64) -> f64 {
    if k == 0 {
        f64::INFINITY
    } else if k > item.thresholds.len() {
        f64::NEG_INFINITY
    } else {
        item.a * (theta - item.thresholds[k - 1])
    }
}

/// `P*_k - P*_{k+1}` written as `σ(u) σ(-v) (1 - e^(v-u))`, which keeps
/// full relative precision where both boundaries sit near 0 or 1.
#[inline]
fn grm_category(item: &Item, k: usize, theta: f64) -> f64 {
    let u = boundary_logit(item, k, theta);
    let v = boundary_logit(item, k + 1, theta);
    logistic(u) * logistic(-v) * -(v - u).exp_m1()
}

/// `d ln P_k / d theta` of a GRM category. Since
/// `P*(1-P*)` differences factor as `(P*_k - P*_{k+1})(1 - P*_k - P*_{k+1})`,
/// this is `a (σ(-u) - σ(v))`, free of cancellation and division.
#[inline]
fn grm_score(item: &Item, k: usize, theta: f64) -> f64 {
    let u = boundary_logit(item, k, theta);
    let v = boundary_logit(item, k + 1, theta);
    item.a * (logistic(-u) - logistic(v))
}

/// Probability of response category `k` at `theta` (no validation).
#[inline]
pub(crate) fn category_probability(item: &Item, k: usize, theta: f64) -> f64 {
    match item.model {
        Model::Grm => grm_category(item, k, theta),
        _ => {
            let (p, q) = dichotomous(item, theta);
            if k == 1 {
                p
            } else {
                q
            }
        }
    }
}

/// Probabilities of every response category at `theta`.
pub fn category_probabilities(item: &Item, theta: f64) -> Result<Vec<f64>, IrtError> {
    check_theta(theta)?;
    Ok(match item.model {
        Model::Grm => {
            (0..item.n_categories())
                .map(|k| grm_category(item, k, theta))
                .collect()
        }
        _ => {
            let (p, q) = dichotomous(item, theta);
            vec![q, p]
        }
    })
}

/// Cumulative boundary probability `P(X >= k | theta)` of a GRM item.
pub fn cumulative_probability(item: &Item, k: usize, theta: f64) -> Result<f64, IrtError> {
    check_theta(theta)?;
    if item.model != Model::Grm {
        return Err(IrtError::NotGraded(item.id.clone(), item.model));
    }
    let m = item.n_categories();
    if k > m {
        return Err(IrtError::BoundaryOutOfRange {
            item: item.id.clone(),
            k,
            max: m,
        });
    }
    Ok(boundary(item, k, theta))
}

/// Fisher information of a single item at `theta` (no validation).
#[inline]
pub(crate) fn information_unchecked(item: &Item, theta: f64) -> f64 {
    let a2 = item.a * item.a;
    match item.model {
        Model::OnePl | Model::TwoPl => {
            let (p, q) = dichotomous(item, theta);
            a2 * p * q
        }
        Model::ThreePl => {
            let (p, q) = dichotomous(item, theta);
            let s = (p - item.c) / (1.0 - item.c);
            if p <= 0.0 {
                0.0
            } else {
                a2 * s * s * q / p
            }
        }
        // Samejima's sum of P_k'^2 / P_k, taken as P_k (d ln P_k)^2.
        Model::Grm => (0..item.n_categories())
            .map(|k| grm_category(item, k, theta) * grm_score(item, k, theta).powi(2))
            .sum(),
    }
}

/// Fisher information `I_i(theta)` of one item.
///
/// 1PL/2PL use `a^2 P (1 - P)`; 3PL applies the lower-asymptote correction
/// `a^2 ((P - c)/(1 - c))^2 (1 - P)/P`; GRM sums Samejima's category
/// information.
pub fn item_information(item: &Item, theta: f64) -> Result<f64, IrtError> {
    check_theta(theta)?;
    Ok(information_unchecked(item, theta))
}

/// Total information of a set of items at `theta`.
pub fn test_information<'a>(items: impl IntoIterator<Item = &'a Item>, theta: f64) -> f64 {
    items
        .into_iter()
        .map(|it| information_unchecked(it, theta))
        .sum()
}

/// `d ln P_k / d theta` for one observed category (no validation).
#[inline]
pub(crate) fn category_score(item: &Item, k: usize, theta: f64) -> f64 {
    match item.model {
        Model::OnePl | Model::TwoPl => {
            let (p, _) = dichotomous(item, theta);
            item.a * (k as f64 - p)
        }
        Model::ThreePl => {
            let (p, _) = dichotomous(item, theta);
            let p = p.max(LOG_FLOOR);
            item.a * (p - item.c) * (k as f64 - p) / ((1.0 - item.c) * p)
        }
        Model::Grm => grm_score(item, k, theta),
    }
}

/// Items paired with their responses, validated once and reused by the
/// estimators.
#[derive(Debug, Clone)]
pub struct ScoredPattern<'a> {
    pairs: Vec<(&'a Item, usize)>,
}

impl<'a> ScoredPattern<'a> {
    /// Pairs each response with the item carrying its id.
    pub fn new(items: &'a [Item], responses: &[Response]) -> Result<Self, IrtError> {
        let by_id: HashMap<&str, &Item> = items.iter().map(|it| (it.id.as_str(), it)).collect();
        Self::from_lookup(|id| by_id.get(id).copied(), responses)
    }

    pub fn from_lookup<F>(lookup: F, responses: &[Response]) -> Result<Self, IrtError>
    where
        F: Fn(&str) -> Option<&'a Item>,
    {
        let mut pairs = Vec::with_capacity(responses.len());
        for r in responses {
            let item = lookup(&r.item_id).ok_or_else(|| IrtError::UnknownItem(r.item_id.clone()))?;
            let categories = item.n_categories();
            if r.value as usize >= categories {
                return Err(IrtError::ResponseOutOfRange {
                    item: item.id.clone(),
                    value: r.value,
                    categories,
                });
            }
            pairs.push((item, r.value as usize));
        }
        Ok(ScoredPattern { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(&'a Item, usize)] {
        &self.pairs
    }

    pub fn log_likelihood(&self, theta: f64) -> f64 {
        self.pairs
            .iter()
            .map(|&(it, k)| {
                category_probability(it, k, theta)
                    .clamp(LOG_FLOOR, 1.0 - LOG_FLOOR)
                    .ln()
            })
            .sum()
    }

    pub fn score(&self, theta: f64) -> f64 {
        self.pairs
            .iter()
            .map(|&(it, k)| category_score(it, k, theta))
            .sum()
    }

    pub fn information(&self, theta: f64) -> f64 {
        self.pairs
            .iter()
            .map(|&(it, _)| information_unchecked(it, theta))
            .sum()
    }

    /// True when every response sits in its item's lowest category, or every
    /// response sits in its highest; no finite ML estimate exists then.
    pub fn is_extreme(&self) -> bool {
        let all_low = self.pairs.iter().all(|&(_, k)| k == 0);
        let all_high = self
            .pairs
            .iter()
            .all(|&(it, k)| k + 1 == it.n_categories());
        all_low || all_high
    }
}

/// `ln L(theta)` summed over the response set.
pub fn response_log_likelihood(
    items: &[Item],
    responses: &[Response],
    theta: f64,
) -> Result<f64, IrtError> {
    check_theta(theta)?;
    if responses.is_empty() {
        return Err(IrtError::EmptyResponses);
    }
    Ok(ScoredPattern::new(items, responses)?.log_likelihood(theta))
}

/// Derivative of [`response_log_likelihood`] with respect to theta.
pub fn score_function(items: &[Item], responses: &[Response], theta: f64) -> Result<f64, IrtError> {
    check_theta(theta)?;
    if responses.is_empty() {
        return Err(IrtError::EmptyResponses);
    }
    Ok(ScoredPattern::new(items, responses)?.score(theta))
}
