//! Next-item selection.
//!
//! Three criteria score the unadministered items of a bank:
//!
//! - `MFI`: item information at the current estimate.
//! - `MFI_PRECISION`: `I / (1 + I * se^2) * w`, with the stability weight
//!   `w` fixed to 1 (see [`stability_weight`]).
//! - `CONSTRAINED`: `alpha * I + beta * C + gamma / (1 + n_i) + delta * ML`,
//!   a weighted mix of information, content shortfall, inverse exposure and
//!   an externally supplied score.
//!
//! Ties are broken by ascending item id unless a randomesque top-k draw is
//! requested. Sympson-Hetter filtering is applied by the caller on the
//! ranked candidates.

use std::collections::{BTreeMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimate::AbilityEstimate;
use crate::irt::{information_unchecked, Item};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SelectError {
    #[error("every item in the pool has been administered")]
    PoolExhausted,
    #[error("selection weights must be non-negative with at least one positive")]
    InvalidWeights,
    #[error("item {0} is not tracked by the exposure ledger")]
    UnknownItem(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Criterion {
    #[serde(rename = "MFI")]
    Mfi,
    #[serde(rename = "MFI_PRECISION")]
    MfiPrecision,
    #[serde(rename = "CONSTRAINED")]
    Constrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    #[serde(default)]
    pub delta: f64,
    /// Externally computed per-item scores in `[0, 1]`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub external_scores: BTreeMap<String, f64>,
}

impl Default for SelectionWeights {
    fn default() -> Self {
        SelectionWeights {
            alpha: 1.0,
            beta: 0.5,
            gamma: 0.25,
            delta: 0.0,
            external_scores: BTreeMap::new(),
        }
    }
}

impl SelectionWeights {
    pub fn information_only() -> Self {
        SelectionWeights {
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.0,
            delta: 0.0,
            external_scores: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<(), SelectError> {
        let w = [self.alpha, self.beta, self.gamma, self.delta];
        let scores_ok = self
            .external_scores
            .values()
            .all(|s| (0.0..=1.0).contains(s));
        if w.iter().all(|x| x.is_finite() && *x >= 0.0) && w.iter().any(|x| *x > 0.0) && scores_ok
        {
            Ok(())
        } else {
            Err(SelectError::InvalidWeights)
        }
    }
}

/// How the Sympson-Hetter acceptance probability is computed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShFormula {
    /// `min(1, K_i / s_i) * min(1, K_i / r_i)`: `s_i` is the faded rate at
    /// which the item is offered to the filter and `r_i` its observed
    /// exposure rate. The first factor settles administrations at `K_i`, the
    /// second pulls back any accumulated overshoot.
    #[default]
    Standard,
    /// `min(1, K_i / (r_i * N))`, kept for compatibility; acceptance decays
    /// towards zero as `N` grows.
    Literal,
}

pub const DEFAULT_FADING: f64 = 0.99;

fn default_fading() -> f64 {
    DEFAULT_FADING
}

/// Cross-session administration counts for one bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureLedger {
    administrations: BTreeMap<String, u64>,
    #[serde(default)]
    selections: BTreeMap<String, u64>,
    /// Offer counts and session count under exponential fading.
    #[serde(default)]
    faded_selections: BTreeMap<String, f64>,
    #[serde(default)]
    faded_sessions: f64,
    #[serde(default = "default_fading")]
    fading: f64,
    sessions_total: u64,
    targets: BTreeMap<String, f64>,
    default_target: f64,
}

impl ExposureLedger {
    /// A ledger tracking `item_ids`, every item targeted at `default_target`.
    pub fn new<I, S>(item_ids: I, default_target: f64) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ExposureLedger {
            administrations: item_ids.into_iter().map(|id| (id.into(), 0)).collect(),
            selections: BTreeMap::new(),
            faded_selections: BTreeMap::new(),
            faded_sessions: 0.0,
            fading: default_fading(),
            sessions_total: 0,
            targets: BTreeMap::new(),
            default_target,
        }
    }

    pub fn for_items(items: &[Item], default_target: f64) -> Self {
        Self::new(items.iter().map(|it| it.id.clone()), default_target)
    }

    pub fn with_target(mut self, item_id: impl Into<String>, target: f64) -> Self {
        self.targets.insert(item_id.into(), target);
        self
    }

    /// Per-session decay applied to offer counts; 1 keeps the full history.
    pub fn with_fading(mut self, fading: f64) -> Self {
        self.fading = fading.clamp(0.0, 1.0);
        self
    }

    pub fn open_session(&mut self) {
        self.sessions_total += 1;
        if self.fading < 1.0 {
            for v in self.faded_selections.values_mut() {
                *v *= self.fading;
            }
        }
        self.faded_sessions = self.faded_sessions * self.fading + 1.0;
    }

    pub fn sessions_total(&self) -> u64 {
        self.sessions_total
    }

    pub fn record_administration(&mut self, item_id: &str) -> Result<(), SelectError> {
        let count = self
            .administrations
            .get_mut(item_id)
            .ok_or_else(|| SelectError::UnknownItem(item_id.to_string()))?;
        *count += 1;
        Ok(())
    }

    /// Counts one offer of `item_id` to the exposure filter, accepted or not.
    pub fn record_selection(&mut self, item_id: &str) -> Result<(), SelectError> {
        if !self.administrations.contains_key(item_id) {
            return Err(SelectError::UnknownItem(item_id.to_string()));
        }
        *self.selections.entry(item_id.to_string()).or_insert(0) += 1;
        *self.faded_selections.entry(item_id.to_string()).or_insert(0.0) += 1.0;
        Ok(())
    }

    pub fn selections(&self, item_id: &str) -> u64 {
        self.selections.get(item_id).copied().unwrap_or(0)
    }

    /// Offers per session under fading memory, so that the rate tracks the
    /// current selection pressure on the item.
    pub fn selection_rate(&self, item_id: &str) -> f64 {
        let offers = self.faded_selections.get(item_id).copied().unwrap_or(0.0);
        offers / self.faded_sessions.max(1.0)
    }

    pub fn administrations(&self, item_id: &str) -> u64 {
        self.administrations.get(item_id).copied().unwrap_or(0)
    }

    /// Observed exposure rate `n_i / max(1, N)`.
    pub fn rate(&self, item_id: &str) -> f64 {
        self.administrations(item_id) as f64 / self.sessions_total.max(1) as f64
    }

    pub fn target(&self, item_id: &str) -> f64 {
        self.targets
            .get(item_id)
            .copied()
            .unwrap_or(self.default_target)
    }

    pub fn rates(&self) -> BTreeMap<String, f64> {
        self.administrations
            .keys()
            .map(|id| (id.clone(), self.rate(id)))
            .collect()
    }

    pub fn max_rate(&self) -> f64 {
        self.administrations
            .keys()
            .map(|id| self.rate(id))
            .fold(0.0, f64::max)
    }

    /// Folds another ledger's counts into this one.
    pub fn merge(&mut self, other: &ExposureLedger) {
        self.sessions_total += other.sessions_total;
        for (id, n) in &other.administrations {
            *self.administrations.entry(id.clone()).or_insert(0) += n;
        }
        for (id, n) in &other.selections {
            *self.selections.entry(id.clone()).or_insert(0) += n;
        }
        for (id, n) in &other.faded_selections {
            *self.faded_selections.entry(id.clone()).or_insert(0.0) += n;
        }
        self.faded_sessions += other.faded_sessions;
    }
}

/// Sympson-Hetter acceptance probability for `item_id`.
pub fn acceptance_probability(item_id: &str, ledger: &ExposureLedger, formula: ShFormula) -> f64 {
    let target = ledger.target(item_id);
    match formula {
        ShFormula::Standard => {
            let s = ledger.selection_rate(item_id);
            let r = ledger.rate(item_id);
            let offered = if s > 0.0 { (target / s).min(1.0) } else { 1.0 };
            let administered = if r > 0.0 { (target / r).min(1.0) } else { 1.0 };
            offered * administered
        }
        ShFormula::Literal => {
            let denom = ledger.rate(item_id) * ledger.sessions_total().max(1) as f64;
            if denom <= 0.0 {
                1.0
            } else {
                (target / denom).min(1.0)
            }
        }
    }
}

/// Bernoulli draw on [`acceptance_probability`]. Unexposed items are always
/// accepted without consuming randomness.
pub fn sympson_hetter_filter<R: Rng + ?Sized>(
    candidate: &str,
    ledger: &ExposureLedger,
    formula: ShFormula,
    rng: &mut R,
) -> bool {
    let p = acceptance_probability(candidate, ledger, formula);
    if p >= 1.0 {
        return true;
    }
    rng.random::<f64>() < p
}

/// Multiplier on the precision-weighted criterion. Constant; replace to
/// experiment with stability-dependent weighting.
pub fn stability_weight(_estimate: &AbilityEstimate) -> f64 {
    1.0
}

pub fn precision_score(information: f64, estimate: &AbilityEstimate) -> f64 {
    information / (1.0 + information * estimate.se * estimate.se) * stability_weight(estimate)
}

/// Content shortfall of `item`'s group, scaled to `[0, 1]` by the target:
/// `max(0, target - observed) / target`.
pub fn content_score(item: &Item, balance: &ContentBalance<'_>) -> f64 {
    let Some(group) = item.group.as_deref() else {
        return 0.0;
    };
    let Some(&target) = balance.targets.get(group) else {
        return 0.0;
    };
    if target <= 0.0 {
        return 0.0;
    }
    let observed = if balance.total == 0 {
        0.0
    } else {
        balance.counts.get(group).copied().unwrap_or(0) as f64 / balance.total as f64
    };
    ((target - observed).max(0.0) / target).min(1.0)
}

/// Group targets plus the session's realized group counts.
#[derive(Debug, Clone)]
pub struct ContentBalance<'a> {
    pub targets: &'a BTreeMap<String, f64>,
    pub counts: BTreeMap<String, usize>,
    pub total: usize,
}

impl<'a> ContentBalance<'a> {
    pub fn from_administered(
        targets: &'a BTreeMap<String, f64>,
        administered: impl IntoIterator<Item = &'a Item>,
    ) -> Self {
        let mut counts = BTreeMap::new();
        let mut total = 0;
        for it in administered {
            total += 1;
            if let Some(g) = &it.group {
                *counts.entry(g.clone()).or_insert(0) += 1;
            }
        }
        ContentBalance { targets, counts, total }
    }
}

/// Everything the constrained criterion needs besides the item itself.
#[derive(Debug, Clone, Copy)]
pub struct ConstraintContext<'a> {
    pub weights: &'a SelectionWeights,
    pub ledger: Option<&'a ExposureLedger>,
    pub content: Option<&'a ContentBalance<'a>>,
}

pub fn constrained_score(item: &Item, estimate: &AbilityEstimate, ctx: &ConstraintContext<'_>) -> f64 {
    let w = ctx.weights;
    let info = information_unchecked(item, estimate.theta);
    let content = ctx.content.map_or(0.0, |c| content_score(item, c));
    let exposure = 1.0 / (1.0 + ctx.ledger.map_or(0, |l| l.administrations(&item.id)) as f64);
    let external = w.external_scores.get(&item.id).copied().unwrap_or(0.0);
    w.alpha * info + w.beta * content + w.gamma * exposure + w.delta * external
}

/// Unadministered items of `bank`, in bank order.
pub fn remaining<'a>(bank: &'a [Item], administered: &[String]) -> Vec<&'a Item> {
    let used: HashSet<&str> = administered.iter().map(String::as_str).collect();
    bank.iter().filter(|it| !used.contains(it.id.as_str())).collect()
}

/// Candidates ordered best first: descending score, ascending id on ties.
pub fn rank<'a, F>(candidates: &[&'a Item], score: F) -> Vec<(&'a Item, f64)>
where
    F: Fn(&Item) -> f64,
{
    let mut scored: Vec<(&Item, f64)> = candidates.iter().map(|it| (*it, score(it))).collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.id.cmp(&b.0.id)));
    scored
}

fn best<'a, F>(bank: &'a [Item], administered: &[String], score: F) -> Result<&'a Item, SelectError>
where
    F: Fn(&Item) -> f64,
{
    rank(&remaining(bank, administered), score)
        .first()
        .map(|(it, _)| *it)
        .ok_or(SelectError::PoolExhausted)
}

pub fn mfi_select<'a>(bank: &'a [Item], administered: &[String], theta: f64) -> Result<&'a Item, SelectError> {
    best(bank, administered, |it| information_unchecked(it, theta))
}

pub fn precision_weighted_mfi<'a>(
    bank: &'a [Item],
    administered: &[String],
    estimate: &AbilityEstimate,
) -> Result<&'a Item, SelectError> {
    best(bank, administered, |it| {
        precision_score(information_unchecked(it, estimate.theta), estimate)
    })
}

pub fn constrained_weighted_select<'a>(
    bank: &'a [Item],
    administered: &[String],
    estimate: &AbilityEstimate,
    weights: &SelectionWeights,
    ledger: Option<&ExposureLedger>,
    group_targets: Option<&BTreeMap<String, f64>>,
) -> Result<&'a Item, SelectError> {
    weights.validate()?;
    let by_id: std::collections::HashMap<&str, &Item> =
        bank.iter().map(|it| (it.id.as_str(), it)).collect();
    let balance = group_targets.map(|t| {
        ContentBalance::from_administered(
            t,
            administered.iter().filter_map(|id| by_id.get(id.as_str()).copied()),
        )
    });
    let ctx = ConstraintContext {
        weights,
        ledger,
        content: balance.as_ref(),
    };
    best(bank, administered, |it| constrained_score(it, estimate, &ctx))
}

/// Uniform draw among the first `k` ranked candidates.
pub fn randomesque<'a, R: Rng + ?Sized>(ranked: &[(&'a Item, f64)], k: usize, rng: &mut R) -> Option<&'a Item> {
    let n = ranked.len().min(k.max(1));
    if n == 0 {
        return None;
    }
    Some(ranked[rng.random_range(0..n)].0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimate::Method;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn est(theta: f64, se: f64) -> AbilityEstimate {
        AbilityEstimate {
            theta,
            se,
            method: Method::Eap,
            converged: true,
            iterations: 0,
        }
    }

    fn three_items() -> Vec<Item> {
        vec![
            Item::two_pl("lo", 1.0, -2.0),
            Item::two_pl("mid", 1.0, 0.0),
            Item::two_pl("hi", 1.0, 2.0),
        ]
    }

    #[test]
    fn mfi_picks_item_at_theta() {
        let bank = three_items();
        assert_eq!(mfi_select(&bank, &[], 0.0).unwrap().id, "mid");
        assert_eq!(mfi_select(&bank, &[], 2.0).unwrap().id, "hi");
        assert_eq!(mfi_select(&bank, &["hi".into()], 2.0).unwrap().id, "mid");
        let all: Vec<String> = bank.iter().map(|i| i.id.clone()).collect();
        assert_eq!(mfi_select(&bank, &all, 0.0), Err(SelectError::PoolExhausted));
    }

    #[test]
    fn ties_break_on_lowest_id() {
        let bank = vec![Item::two_pl("b", 1.0, 0.0), Item::two_pl("a", 1.0, 0.0)];
        assert_eq!(mfi_select(&bank, &[], 0.0).unwrap().id, "a");
    }

    #[test]
    fn precision_criterion_hand_values() {
        // I = 0.5 and I = 1.0 at theta = 0 for 2PL items at b = 0.
        let bank = vec![
            Item::two_pl("x", 2f64.sqrt(), 0.0),
            Item::two_pl("y", 2.0, 0.0),
        ];
        let e = est(0.0, 2.0);
        let sx = precision_score(information_unchecked(&bank[0], 0.0), &e);
        let sy = precision_score(information_unchecked(&bank[1], 0.0), &e);
        assert!((sx - 0.5 / 3.0).abs() < 1e-12);
        assert!((sy - 0.2).abs() < 1e-12);
        assert_eq!(precision_weighted_mfi(&bank, &[], &e).unwrap().id, "y");
        assert_eq!(precision_weighted_mfi(&bank[..1], &[], &e).unwrap().id, "x");
    }

    #[test]
    fn constrained_reduces_to_mfi() {
        let bank = three_items();
        let w = SelectionWeights::information_only();
        for theta in [-2.5, -0.3, 0.9, 3.0] {
            let c = constrained_weighted_select(&bank, &[], &est(theta, 0.5), &w, None, None).unwrap();
            assert_eq!(c.id, mfi_select(&bank, &[], theta).unwrap().id);
        }
    }

    #[test]
    fn content_term_prefers_under_represented_group() {
        let bank = vec![
            Item::two_pl("g1", 2.0, 0.0).with_group("geometry"),
            Item::two_pl("g2", 2.0, 0.1).with_group("geometry"),
            Item::two_pl("a1", 0.5, 2.0).with_group("algebra"),
        ];
        let targets: BTreeMap<String, f64> =
            [("geometry".into(), 0.5), ("algebra".into(), 0.5)].into();
        let w = SelectionWeights {
            alpha: 0.0,
            beta: 1.0,
            gamma: 0.0,
            ..SelectionWeights::default()
        };
        let pick = constrained_weighted_select(&bank, &["g1".into()], &est(0.0, 1.0), &w, None, Some(&targets)).unwrap();
        assert_eq!(pick.id, "a1");
    }

    #[test]
    fn invalid_weights_rejected() {
        let w = SelectionWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            delta: 0.0,
            external_scores: BTreeMap::new(),
        };
        assert_eq!(w.validate(), Err(SelectError::InvalidWeights));
        let neg = SelectionWeights { alpha: -1.0, ..Default::default() };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn ledger_rates() {
        let mut l = ExposureLedger::new(["x", "y"], 0.25);
        l.open_session();
        l.record_administration("x").unwrap();
        assert_eq!(l.rate("x"), 1.0);
        assert!(l.record_administration("zz").is_err());

        let mut l = ExposureLedger::new(["x"], 0.25);
        for s in 0..100 {
            l.open_session();
            if s % 4 == 0 {
                l.record_administration("x").unwrap();
            }
        }
        assert_eq!(l.rate("x"), 0.25);
    }

    #[test]
    fn ledger_counts_are_additive_across_sessions() {
        let mut l = ExposureLedger::new(["a", "b", "c"], 1.0);
        let sessions: [&[&str]; 3] = [&["a", "b"], &["b", "c"], &["a", "b", "c"]];
        for _ in sessions {
            l.open_session();
        }
        // interleave administrations from the three sessions
        for step in 0..3 {
            for s in sessions {
                if let Some(id) = s.get(step) {
                    l.record_administration(id).unwrap();
                }
            }
        }
        assert_eq!(l.administrations("a"), 2);
        assert_eq!(l.administrations("b"), 3);
        assert_eq!(l.administrations("c"), 2);
    }

    #[test]
    fn sympson_hetter_probabilities() {
        let mut l = ExposureLedger::new(["x"], 0.25).with_fading(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert!(sympson_hetter_filter("x", &l, ShFormula::Standard, &mut rng));

        for s in 0..10 {
            l.open_session();
            if s % 2 == 0 {
                l.record_selection("x").unwrap();
                l.record_administration("x").unwrap();
            }
        }
        // offered in half the sessions, administered in half
        assert_eq!(acceptance_probability("x", &l, ShFormula::Standard), 0.25);
        let accepted = (0..10_000)
            .filter(|_| sympson_hetter_filter("x", &l, ShFormula::Standard, &mut rng))
            .count();
        let rate = accepted as f64 / 10_000.0;
        assert!((0.24..=0.26).contains(&rate), "{rate}");

        let generous = l.clone().with_target("x", 0.9);
        assert_eq!(acceptance_probability("x", &generous, ShFormula::Standard), 1.0);
        assert!((acceptance_probability("x", &l, ShFormula::Literal) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn randomesque_stays_in_top_k() {
        let bank: Vec<Item> = (0..20).map(|i| Item::two_pl(format!("i{i:02}"), 1.0, i as f64 * 0.2 - 2.0)).collect();
        let refs: Vec<&Item> = bank.iter().collect();
        let ranked = rank(&refs, |it| information_unchecked(it, 0.0));
        let top: HashSet<&str> = ranked[..5].iter().map(|(it, _)| it.id.as_str()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let pick = randomesque(&ranked, 5, &mut rng).unwrap();
            assert!(top.contains(pick.id.as_str()));
        }
    }
}
