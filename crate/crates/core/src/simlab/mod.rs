//! Monte Carlo simulation of adaptive sessions.
//!
//! A [`SimulationSpec`] describes one condition: a bank, a study
//! configuration, an ability distribution and the replication layout.
//! [`run_condition`] draws examinees, runs every session headlessly through
//! the [`Engine`] and reduces the outcomes to a [`SimulationReport`].
//! Replications run in parallel, each with its own random stream derived
//! from the master seed, and are reduced in index order, so a report depends
//! only on its spec.

mod report;

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::{generate_bank, load_bank_file, BankError, BankSpec, ItemBank};
use crate::engine::{classify, Engine, EngineError, NextStep, StudyConfig};
use crate::irt::{category_probabilities, Item, Model, Response};
use crate::select::ExposureLedger;

pub use report::{emit_report, parse_csv, ReportFormat, ReportRow, CSV_HEADER};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation spec: {}", .0.join("; "))]
    Spec(Vec<String>),
    #[error("bank: {0}")]
    Bank(#[from] BankError),
    #[error("condition {condition}, replication {replication}: {source}")]
    Engine {
        condition: String,
        replication: usize,
        source: EngineError,
    },
}

/// Population distribution of true abilities. Every shape has mean 0; all
/// but the bimodal mixture have standard deviation 1.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbilityDistribution {
    #[default]
    Normal,
    /// `(X - 3) / sqrt(6)` with `X ~ chi-square(3)`.
    PositiveSkew,
    /// Mirror image of [`AbilityDistribution::PositiveSkew`].
    NegativeSkew,
    /// `0.5 N(-1, 0.5^2) + 0.5 N(1, 0.5^2)`. Its sd is `sqrt(1.25)`.
    Bimodal,
}

impl AbilityDistribution {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            AbilityDistribution::Normal => rng.sample(StandardNormal),
            AbilityDistribution::PositiveSkew => chi2_standardized(rng),
            AbilityDistribution::NegativeSkew => -chi2_standardized(rng),
            AbilityDistribution::Bimodal => {
                let z: f64 = rng.sample(StandardNormal);
                let centre = if rng.random::<bool>() { 1.0 } else { -1.0 };
                centre + 0.5 * z
            }
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            AbilityDistribution::Normal => "N(0,1)",
            AbilityDistribution::PositiveSkew => "(chi2(3)-3)/sqrt(6)",
            AbilityDistribution::NegativeSkew => "-(chi2(3)-3)/sqrt(6)",
            AbilityDistribution::Bimodal => "0.5 N(-1,0.25) + 0.5 N(1,0.25)",
        }
    }
}

fn chi2_standardized<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let chi = ChiSquared::new(3.0).expect("three degrees of freedom");
    (chi.sample(rng) - 3.0) / 6f64.sqrt()
}

/// Where a condition's bank comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BankSource {
    File { file: PathBuf },
    Generated(BankSpec),
}

impl Default for BankSource {
    fn default() -> Self {
        BankSource::Generated(BankSpec::default())
    }
}

impl BankSource {
    pub fn load(&self) -> Result<ItemBank, SimError> {
        Ok(match self {
            BankSource::File { file } => load_bank_file(file)?,
            BankSource::Generated(spec) => generate_bank(spec)?,
        })
    }
}

/// One simulated condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub bank: BankSource,
    pub config: StudyConfig,
    #[serde(default = "default_examinees")]
    pub n_examinees: usize,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub distribution: AbilityDistribution,
    /// Also run the fixed-order linear comparator.
    #[serde(default)]
    pub linear: bool,
    /// SEM the linear comparator must reach; the study's `min_sem` if unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linear_target_sem: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Run every examinee twice and correlate the two estimates.
    #[serde(default)]
    pub test_retest: bool,
    /// Band treated as "positive" for sensitivity and specificity; the last
    /// band when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive_band: Option<String>,
}

fn default_name() -> String {
    "condition".to_string()
}

fn default_examinees() -> usize {
    500
}

fn default_replications() -> usize {
    20
}

impl SimulationSpec {
    pub fn new(name: impl Into<String>, bank: BankSource, config: StudyConfig) -> Self {
        SimulationSpec {
            name: name.into(),
            bank,
            config,
            n_examinees: default_examinees(),
            replications: default_replications(),
            distribution: AbilityDistribution::Normal,
            linear: false,
            linear_target_sem: None,
            seed: 0,
            test_retest: false,
            positive_band: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        toml::from_str(text).map_err(|e| SimError::Spec(vec![e.message().to_string()]))
    }

    /// Loads the bank and binds the configuration, collecting every problem.
    pub fn prepare(&self) -> Result<Engine, SimError> {
        let mut problems = Vec::new();
        if self.n_examinees == 0 {
            problems.push("n_examinees must be positive".to_string());
        }
        if self.replications == 0 {
            problems.push("replications must be positive".to_string());
        }
        if let Some(t) = self.linear_target_sem {
            if !(t > 0.0) {
                problems.push("linear_target_sem must be positive".to_string());
            }
        }
        if let (Some(pos), Some(bands)) = (&self.positive_band, &self.config.cutoffs) {
            if !bands.iter().any(|b| &b.label == pos) {
                problems.push(format!("positive_band {pos:?} is not a configured band"));
            }
        }
        let bank = match self.bank.load() {
            Ok(bank) => Some(bank),
            Err(e) => {
                problems.push(e.to_string());
                None
            }
        };
        let engine = bank.and_then(|bank| match Engine::new(self.config.clone(), bank) {
            Ok(engine) => Some(engine),
            Err(EngineError::InvalidConfig(v)) => {
                problems.extend(v.into_iter().map(|v| format!("config.{}: {}", v.field, v.message)));
                None
            }
            Err(e) => {
                problems.push(e.to_string());
                None
            }
        });
        match engine {
            Some(engine) if problems.is_empty() => Ok(engine),
            _ => Err(SimError::Spec(problems)),
        }
    }
}

/// Draws a response category by inverting the model's CDF at one uniform
/// draw.
pub fn simulate_examinee_response<R: Rng + ?Sized>(item: &Item, theta: f64, rng: &mut R) -> Response {
    let probs = category_probabilities(item, theta).expect("valid item and finite theta");
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut value = probs.len() - 1;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            value = k;
            break;
        }
    }
    Response::new(item.id.clone(), value as u32)
}

/// What one simulated examinee produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamineeRecord {
    pub replication: usize,
    pub examinee: usize,
    pub theta_true: f64,
    pub theta_hat: f64,
    pub se: f64,
    pub length: usize,
    pub items: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retest_theta: Option<f64>,
}

/// How a session's reported ability is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scoring {
    Estimated,
    /// Reports the true ability. Isolates the metric code from estimation.
    Oracle,
}

/// Error summaries of estimates against true values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub n: usize,
    pub rmse: f64,
    pub bias: f64,
    pub mae: f64,
    pub r: f64,
}

/// RMSE, bias, MAE and Pearson r of `estimates` against `truth`.
pub fn recovery(truth: &[f64], estimates: &[f64]) -> Recovery {
    assert_eq!(truth.len(), estimates.len());
    let n = truth.len();
    let nf = n as f64;
    let (mut sq, mut sum, mut abs) = (0.0, 0.0, 0.0);
    for (t, e) in truth.iter().zip(estimates) {
        let d = e - t;
        sq += d * d;
        sum += d;
        abs += d.abs();
    }
    Recovery {
        n,
        rmse: (sq / nf).sqrt(),
        bias: sum / nf,
        mae: abs / nf,
        r: pearson(truth, estimates),
    }
}

/// Pearson correlation; NaN when either side has no variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        if sxx == 0.0 && syy == 0.0 && x.iter().zip(y).all(|(a, b)| a == b) {
            return 1.0;
        }
        return f64::NAN;
    }
    sxy / (sxx * syy).sqrt()
}

/// A mean over replications with its normal-approximation 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn from_samples(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let half = if values.len() > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            1.96 * (var / n).sqrt()
        } else {
            0.0
        };
        Interval {
            mean,
            lo: mean - half,
            hi: mean + half,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub accuracy: f64,
    /// `None` when no examinee truly belongs to the positive band.
    pub sensitivity: Option<f64>,
    /// `None` when every examinee truly belongs to the positive band.
    pub specificity: Option<f64>,
}

/// Agreement between the bands of true and estimated abilities.
pub fn classification_metrics(
    pairs: &[(f64, f64)],
    bands: &[crate::engine::Band],
    positive: &str,
) -> Classification {
    let (mut agree, mut tp, mut pos, mut tn, mut neg) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for &(truth, est) in pairs {
        let t = classify(bands, truth);
        let e = classify(bands, est);
        if t == e {
            agree += 1;
        }
        if t == Some(positive) {
            pos += 1;
            tp += (e == Some(positive)) as usize;
        } else {
            neg += 1;
            tn += (e != Some(positive)) as usize;
        }
    }
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    Classification {
        accuracy: agree as f64 / pairs.len().max(1) as f64,
        sensitivity: ratio(tp, pos),
        specificity: ratio(tn, neg),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureSummary {
    pub max_rate: f64,
    pub mean_rate: f64,
    /// Items never administered.
    pub unused: usize,
    /// Items by exposure rate in bins of width 0.05.
    pub histogram: Vec<HistogramBin>,
}

impl ExposureSummary {
    fn from_rates(rates: &[f64]) -> Self {
        let width = 0.05;
        let nbins = 20;
        let mut histogram: Vec<HistogramBin> = (0..nbins)
            .map(|i| HistogramBin {
                lo: i as f64 * width,
                hi: (i + 1) as f64 * width,
                count: 0,
            })
            .collect();
        for &r in rates {
            let i = ((r / width) as usize).min(nbins - 1);
            histogram[i].count += 1;
        }
        ExposureSummary {
            max_rate: rates.iter().copied().fold(0.0, f64::max),
            mean_rate: rates.iter().sum::<f64>() / rates.len().max(1) as f64,
            unused: rates.iter().filter(|&&r| r == 0.0).count(),
            histogram,
        }
    }
}

/// Per-condition results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub name: String,
    pub model: Model,
    pub n_items: usize,
    pub distribution: AbilityDistribution,
    pub distribution_label: String,
    pub n_examinees: usize,
    pub replications: usize,
    pub seed: u64,
    pub length: f64,
    pub rmse: f64,
    pub bias: f64,
    pub mae: f64,
    pub r: f64,
    pub mean_se: f64,
    pub intervals: BTreeMap<String, Interval>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linear_length: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub efficiency: Option<f64>,
    pub exposure: ExposureSummary,
    /// Share of administered items per content group.
    pub group_shares: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification: Option<Classification>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_retest_r: Option<f64>,
    #[serde(skip)]
    pub records: Vec<ExamineeRecord>,
    #[serde(skip)]
    pub ledger: Option<ExposureLedger>,
}

/// Random stream for replication `rep` of a condition seeded with `seed`.
pub fn replication_rng(seed: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64 + 1);
    rng
}

/// Runs one headless session for an examinee at `theta`. Responses come
/// from `answers`; the session's own stream is seeded with `session_seed`.
pub fn run_session(
    engine: &Engine,
    theta: f64,
    session_seed: u64,
    answers: &mut impl RngCore,
    mut ledger: Option<&mut ExposureLedger>,
) -> Result<crate::engine::SessionState, EngineError> {
    if let Some(l) = ledger.as_deref_mut() {
        l.open_session();
    }
    let mut state = engine.start_session(format!("sim-{session_seed:016x}"), session_seed, 0);
    engine.begin(&mut state, 0)?;
    loop {
        match engine.next_item(&mut state, ledger.as_deref(), 0)? {
            NextStep::Stop(_) => return Ok(state),
            NextStep::Item(id) => {
                let item = engine.item(&id).expect("engine issues bank items");
                let response = simulate_examinee_response(item, theta, answers);
                engine.submit_response(&mut state, response, ledger.as_deref_mut(), 0)?;
            }
        }
    }
}

struct ReplicationOutcome {
    records: Vec<ExamineeRecord>,
    ledger: ExposureLedger,
}

fn run_replication(
    engine: &Engine,
    spec: &SimulationSpec,
    rep: usize,
    scoring: Scoring,
) -> Result<ReplicationOutcome, EngineError> {
    let mut rng = replication_rng(spec.seed, rep);
    let mut ledger = engine.new_ledger();
    let mut records = Vec::with_capacity(spec.n_examinees);
    for examinee in 0..spec.n_examinees {
        let theta = spec.distribution.sample(&mut rng);
        let session_seed = rng.next_u64();
        let state = run_session(engine, theta, session_seed, &mut rng, Some(&mut ledger))?;
        let est = state.current_estimate().copied();
        let (theta_hat, se) = match (scoring, est) {
            (Scoring::Oracle, _) => (theta, 0.0),
            (Scoring::Estimated, Some(e)) => (e.theta, e.se),
            (Scoring::Estimated, None) => (engine.config().estimation.prior.mean, engine.config().estimation.prior.sd),
        };
        let retest_theta = if spec.test_retest {
            let seed = rng.next_u64();
            let again = run_session(engine, theta, seed, &mut rng, None)?;
            Some(match scoring {
                Scoring::Oracle => theta,
                Scoring::Estimated => again.current_estimate().map_or(0.0, |e| e.theta),
            })
        } else {
            None
        };
        records.push(ExamineeRecord {
            replication: rep,
            examinee,
            theta_true: theta,
            theta_hat,
            se,
            length: state.responses.len(),
            items: state.administered,
            retest_theta,
        });
    }
    Ok(ReplicationOutcome { records, ledger })
}

/// Runs a condition with the engine's estimates.
pub fn run_condition(spec: &SimulationSpec) -> Result<SimulationReport, SimError> {
    run_condition_with(spec, Scoring::Estimated)
}

pub fn run_condition_with(spec: &SimulationSpec, scoring: Scoring) -> Result<SimulationReport, SimError> {
    let engine = spec.prepare()?;
    run_prepared(&engine, spec, scoring)
}

/// Runs a condition against an already bound engine. `spec.bank` and
/// `spec.config` are not consulted.
pub fn run_prepared(engine: &Engine, spec: &SimulationSpec, scoring: Scoring) -> Result<SimulationReport, SimError> {
    let outcomes: Vec<ReplicationOutcome> = (0..spec.replications)
        .into_par_iter()
        .map(|rep| {
            run_replication(engine, spec, rep, scoring).map_err(|source| SimError::Engine {
                condition: spec.name.clone(),
                replication: rep,
                source,
            })
        })
        .collect::<Result<_, _>>()?;

    let mut per_rep: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut ledger = engine.new_ledger();
    let mut records = Vec::new();
    for outcome in outcomes {
        let truth: Vec<f64> = outcome.records.iter().map(|r| r.theta_true).collect();
        let est: Vec<f64> = outcome.records.iter().map(|r| r.theta_hat).collect();
        let rec = recovery(&truth, &est);
        let mean_len = outcome.records.iter().map(|r| r.length as f64).sum::<f64>() / truth.len() as f64;
        per_rep.entry("rmse").or_default().push(rec.rmse);
        per_rep.entry("bias").or_default().push(rec.bias);
        per_rep.entry("mae").or_default().push(rec.mae);
        per_rep.entry("r").or_default().push(rec.r);
        per_rep.entry("length").or_default().push(mean_len);
        ledger.merge(&outcome.ledger);
        records.extend(outcome.records);
    }

    let truth: Vec<f64> = records.iter().map(|r| r.theta_true).collect();
    let est: Vec<f64> = records.iter().map(|r| r.theta_hat).collect();
    let overall = recovery(&truth, &est);
    let n = records.len() as f64;
    let length = records.iter().map(|r| r.length as f64).sum::<f64>() / n;
    let mean_se = records.iter().map(|r| r.se).sum::<f64>() / n;

    let linear_length = if spec.linear {
        let target = spec.linear_target_sem.unwrap_or(engine.config().min_sem);
        Some(linear_comparator(engine, &truth, target, spec.seed))
    } else {
        None
    };
    let efficiency = linear_length.map(|lin| 1.0 - length / lin);

    let rates: Vec<f64> = engine.bank().items.iter().map(|it| ledger.rate(&it.id)).collect();
    let group_shares = group_shares(engine, &records);
    let classification = engine.config().cutoffs.as_ref().map(|bands| {
        let positive = spec
            .positive_band
            .clone()
            .unwrap_or_else(|| bands.last().map(|b| b.label.clone()).unwrap_or_default());
        let pairs: Vec<(f64, f64)> = truth.iter().copied().zip(est.iter().copied()).collect();
        classification_metrics(&pairs, bands, &positive)
    });
    let test_retest_r = spec.test_retest.then(|| {
        let again: Vec<f64> = records.iter().map(|r| r.retest_theta.unwrap_or(f64::NAN)).collect();
        pearson(&est, &again)
    });

    Ok(SimulationReport {
        name: spec.name.clone(),
        model: engine.bank().model,
        n_items: engine.bank().len(),
        distribution: spec.distribution,
        distribution_label: spec.distribution.label().to_string(),
        n_examinees: spec.n_examinees,
        replications: spec.replications,
        seed: spec.seed,
        length,
        rmse: overall.rmse,
        bias: overall.bias,
        mae: overall.mae,
        r: overall.r,
        mean_se,
        intervals: per_rep
            .into_iter()
            .map(|(k, v)| (k.to_string(), Interval::from_samples(&v)))
            .collect(),
        linear_length,
        efficiency,
        exposure: ExposureSummary::from_rates(&rates),
        group_shares,
        classification,
        test_retest_r,
        records,
        ledger: Some(ledger),
    })
}

fn group_shares(engine: &Engine, records: &[ExamineeRecord]) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut total = 0usize;
    for id in records.iter().flat_map(|r| &r.items) {
        if let Some(group) = engine.item(id).and_then(|it| it.group.clone()) {
            *counts.entry(group).or_default() += 1;
            total += 1;
        }
    }
    counts
        .into_iter()
        .map(|(g, c)| (g, c as f64 / total.max(1) as f64))
        .collect()
}

/// Mean length of a non-adaptive test that gives items in one fixed,
/// seeded order until the reported SE reaches `target_sem` or the bank runs
/// out. The first item is always given.
pub fn linear_comparator(engine: &Engine, thetas: &[f64], target_sem: f64, seed: u64) -> f64 {
    let mut order: Vec<&Item> = engine.bank().items.iter().collect();
    let mut shuffle = ChaCha8Rng::seed_from_u64(seed ^ 0x6c69_6e65_6172);
    for i in (1..order.len()).rev() {
        let j = shuffle.random_range(0..=i);
        order.swap(i, j);
    }
    let lengths: Vec<usize> = thetas
        .par_iter()
        .enumerate()
        .map(|(k, &theta)| {
            let mut answers = ChaCha8Rng::seed_from_u64(seed);
            answers.set_stream(0x1_0000_0000 + k as u64);
            let mut responses = Vec::new();
            for item in &order {
                responses.push(simulate_examinee_response(item, theta, &mut answers));
                let se = engine.estimate(&responses).map_or(f64::INFINITY, |e| e.se);
                if se <= target_sem {
                    break;
                }
            }
            responses.len()
        })
        .collect();
    lengths.iter().sum::<usize>() as f64 / lengths.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Band;

    fn spec(model: Model, n_items: usize, length: usize) -> SimulationSpec {
        let mut s = SimulationSpec::new(
            "t",
            BankSource::Generated(BankSpec::new(model, n_items, 11)),
            StudyConfig::new("t", model, length, length, 0.001),
        );
        s.n_examinees = 60;
        s.replications = 3;
        s.seed = 5;
        s
    }

    #[test]
    fn response_frequencies_follow_the_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let item = Item::two_pl("x", 1.0, 0.0);
        let hits = (0..10_000)
            .filter(|_| simulate_examinee_response(&item, 0.0, &mut rng).value == 1)
            .count();
        assert!((hits as f64 / 1e4 - 0.5).abs() <= 0.01);

        let guess = Item::three_pl("g", 1.0, 0.0, 0.2);
        let hits = (0..10_000)
            .filter(|_| simulate_examinee_response(&guess, -6.0, &mut rng).value == 1)
            .count();
        assert!((hits as f64 / 1e4 - 0.2).abs() <= 0.01);

        let grm = Item::grm("m", 1.3, vec![-1.0, 0.0, 0.8, 1.5]);
        let probs = category_probabilities(&grm, 0.3).unwrap();
        let mut counts = [0usize; 5];
        for _ in 0..10_000 {
            counts[simulate_examinee_response(&grm, 0.3, &mut rng).value as usize] += 1;
        }
        for (c, p) in counts.iter().zip(&probs) {
            assert!((*c as f64 / 1e4 - p).abs() <= 0.01);
        }
    }

    #[test]
    fn distributions_are_standardized() {
        for d in [
            AbilityDistribution::Normal,
            AbilityDistribution::PositiveSkew,
            AbilityDistribution::NegativeSkew,
            AbilityDistribution::Bimodal,
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let xs: Vec<f64> = (0..50_000).map(|_| d.sample(&mut rng)).collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
            assert!(m.abs() < 0.03, "{d:?} mean {m}");
            let expected_var = if d == AbilityDistribution::Bimodal { 1.25 } else { 1.0 };
            assert!((v - expected_var).abs() < 0.05, "{d:?} var {v}");
            let skew = xs.iter().map(|x| (x - m).powi(3)).sum::<f64>() / xs.len() as f64 / v.powf(1.5);
            match d {
                AbilityDistribution::PositiveSkew => assert!(skew > 1.0),
                AbilityDistribution::NegativeSkew => assert!(skew < -1.0),
                _ => assert!(skew.abs() < 0.1),
            }
        }
    }

    #[test]
    fn oracle_scoring_zeroes_error_metrics() {
        let rep = run_condition_with(&spec(Model::TwoPl, 50, 5), Scoring::Oracle).unwrap();
        assert_eq!(rep.rmse, 0.0);
        assert_eq!(rep.bias, 0.0);
        assert_eq!(rep.mae, 0.0);
        assert_eq!(rep.r, 1.0);
    }

    #[test]
    fn reports_are_deterministic() {
        let s = spec(Model::TwoPl, 50, 5);
        let a = serde_json::to_string(&run_condition(&s).unwrap()).unwrap();
        let b = serde_json::to_string(&run_condition(&s).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rmse_decomposes_into_bias_and_variance() {
        let rep = run_condition(&spec(Model::TwoPl, 50, 5)).unwrap();
        let d: Vec<f64> = rep.records.iter().map(|r| r.theta_hat - r.theta_true).collect();
        let n = d.len() as f64;
        let var = d.iter().map(|x| (x - rep.bias).powi(2)).sum::<f64>() / n;
        assert!((rep.rmse.powi(2) - (rep.bias.powi(2) + var)).abs() < 1e-9);
    }

    #[test]
    fn linear_comparator_boundaries() {
        let s = spec(Model::TwoPl, 80, 10);
        let engine = s.prepare().unwrap();
        let thetas = [0.0, 1.0, -1.0];
        assert_eq!(linear_comparator(&engine, &thetas, f64::INFINITY, 1), 1.0);
        let lin = linear_comparator(&engine, &thetas, 0.3, 1);
        assert!(lin > 5.0);
    }

    #[test]
    fn classification_degenerate_cases() {
        let bands = vec![
            Band { label: "low".into(), lower: None, upper: Some(0.0) },
            Band { label: "high".into(), lower: Some(0.0), upper: None },
        ];
        let pairs: Vec<(f64, f64)> = [-1.0, -0.5, 0.5, 2.0].iter().map(|&t| (t, t)).collect();
        let c = classification_metrics(&pairs, &bands, "high");
        assert_eq!(c.accuracy, 1.0);
        assert_eq!(c.sensitivity, Some(1.0));
        assert_eq!(c.specificity, Some(1.0));

        let all_high: Vec<(f64, f64)> = [0.5, 1.0].iter().map(|&t| (t, t)).collect();
        let c = classification_metrics(&all_high, &bands, "high");
        assert_eq!(c.sensitivity, Some(1.0));
        assert_eq!(c.specificity, None);
    }

    #[test]
    fn spec_problems_are_collected() {
        let mut s = spec(Model::TwoPl, 50, 5);
        s.config.min_items = 10;
        s.replications = 0;
        match s.prepare() {
            Err(SimError::Spec(p)) => assert!(p.len() >= 2, "{p:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn spec_parses_from_toml() {
        let text = r#"
            name = "2pl-200-15"
            n_examinees = 100
            replications = 2
            seed = 7
            distribution = "positive_skew"
            linear = true

            [bank]
            model = "2PL"
            n_items = 200
            seed = 3

            [config]
            name = "sim"
            model = "2PL"
            min_items = 15
            max_items = 15
            min_sem = 0.01
        "#;
        let s = SimulationSpec::from_toml(text).unwrap();
        assert_eq!(s.distribution, AbilityDistribution::PositiveSkew);
        assert!(matches!(&s.bank, BankSource::Generated(b) if b.n_items == 200 && b.seed == 3));
        assert_eq!(s.config.max_items, 15);

        let file = SimulationSpec::from_toml(
            "[bank]\nfile = \"bank.csv\"\n[config]\nname = \"x\"\nmodel = \"1PL\"\nmin_items = 1\nmax_items = 2\nmin_sem = 0.3\n",
        )
        .unwrap();
        assert!(matches!(file.bank, BankSource::File { .. }));
    }
}
