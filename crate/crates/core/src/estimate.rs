//! Ability estimation: EAP on a fixed quadrature grid (the fast path) and
//! Newton-type ML, MAP and WLE estimators (the precise path), tied together
//! by a fallback chain that always terminates in EAP.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::irt::{IrtError, Item, Response, ScoredPattern};

/// Convergence tolerance on the (penalized/weighted) score.
pub const SCORE_TOLERANCE: f64 = 1e-8;
/// Newton iteration cap.
pub const MAX_ITERATIONS: u32 = 50;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimateError {
    #[error("all responses are in an extreme category; the ML estimate is not finite")]
    NonFiniteMle,
    #[error("at least one response is required")]
    NoResponses,
    #[error("no sign change of the estimating equation within [{lo}, {hi}]")]
    NoBracket { lo: f64, hi: f64 },
    #[error("posterior mass vanished on every quadrature node")]
    DegenerateGrid,
    #[error("invalid quadrature grid: {0}")]
    InvalidGrid(String),
    #[error("invalid prior: sd must be positive and finite, got {0}")]
    InvalidPrior(f64),
    #[error(transparent)]
    Irt(#[from] IrtError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "EAP")]
    Eap,
    #[serde(rename = "MAP")]
    Map,
    #[serde(rename = "ML")]
    Ml,
    #[serde(rename = "WLE")]
    Wle,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Eap => "EAP",
            Method::Map => "MAP",
            Method::Ml => "ML",
            Method::Wle => "WLE",
        })
    }
}

/// Point estimate of ability with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbilityEstimate {
    pub theta: f64,
    pub se: f64,
    pub method: Method,
    pub converged: bool,
    pub iterations: u32,
}

/// Normal prior on theta.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub mean: f64,
    pub sd: f64,
}

impl Default for Prior {
    fn default() -> Self {
        Prior { mean: 0.0, sd: 1.0 }
    }
}

impl Prior {
    pub fn new(mean: f64, sd: f64) -> Result<Self, EstimateError> {
        let p = Prior { mean, sd };
        p.check()?;
        Ok(p)
    }

    fn check(&self) -> Result<(), EstimateError> {
        if self.sd > 0.0 && self.sd.is_finite() && self.mean.is_finite() {
            Ok(())
        } else {
            Err(EstimateError::InvalidPrior(self.sd))
        }
    }

    pub fn ln_density(&self, theta: f64) -> f64 {
        let z = (theta - self.mean) / self.sd;
        -0.5 * z * z - self.sd.ln() - LN_SQRT_2PI
    }
}

/// Closed interval the estimates are confined to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds { lo: -4.5, hi: 4.5 }
    }
}

impl Bounds {
    pub fn contains(&self, theta: f64) -> bool {
        theta >= self.lo && theta <= self.hi
    }

    pub fn clamp(&self, theta: f64) -> f64 {
        theta.clamp(self.lo, self.hi)
    }
}

/// Quadrature nodes with their integration weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureGrid {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

pub const MIN_GRID_NODES: usize = 21;

impl QuadratureGrid {
    pub fn new(nodes: Vec<f64>, weights: Vec<f64>) -> Result<Self, EstimateError> {
        if nodes.len() < MIN_GRID_NODES {
            return Err(EstimateError::InvalidGrid(format!(
                "need at least {MIN_GRID_NODES} nodes, got {}",
                nodes.len()
            )));
        }
        if nodes.len() != weights.len() {
            return Err(EstimateError::InvalidGrid(
                "nodes and weights differ in length".into(),
            ));
        }
        if nodes.iter().any(|x| !x.is_finite()) || nodes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EstimateError::InvalidGrid(
                "nodes must be finite and strictly increasing".into(),
            ));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(EstimateError::InvalidGrid("weights must be positive".into()));
        }
        Ok(QuadratureGrid { nodes, weights })
    }

    /// Equally spaced nodes on `[lo, hi]` with equal weights.
    pub fn uniform(n: usize, lo: f64, hi: f64) -> Result<Self, EstimateError> {
        if n < 2 || !(lo < hi) {
            return Err(EstimateError::InvalidGrid(format!(
                "cannot span [{lo}, {hi}] with {n} nodes"
            )));
        }
        let step = (hi - lo) / (n - 1) as f64;
        let nodes = (0..n).map(|i| lo + step * i as f64).collect();
        Self::new(nodes, vec![1.0 / n as f64; n])
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

impl Default for QuadratureGrid {
    fn default() -> Self {
        QuadratureGrid::uniform(101, -5.0, 5.0).expect("default grid is valid")
    }
}

/// Serializable description of a uniform grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nodes: usize,
    pub min: f64,
    pub max: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            nodes: 101,
            min: -5.0,
            max: 5.0,
        }
    }
}

impl GridSpec {
    pub fn build(&self) -> Result<QuadratureGrid, EstimateError> {
        QuadratureGrid::uniform(self.nodes, self.min, self.max)
    }
}

/// Result of [`safeguarded_newton`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Root {
    pub x: f64,
    pub iterations: u32,
    pub converged: bool,
}

/// Finds a zero of `f` inside `[lo, hi]` by Newton steps on a numerically
/// differentiated `f`, bisecting whenever a step leaves the current bracket.
///
/// Fails when `f(lo)` and `f(hi)` have the same strict sign.
pub fn safeguarded_newton<F>(
    f: F,
    lo: f64,
    hi: f64,
    start: f64,
    tol: f64,
    max_iter: u32,
) -> Result<Root, EstimateError>
where
    F: Fn(f64) -> f64,
{
    let (mut lo, mut hi) = (lo, hi);
    let mut f_lo = f(lo);
    let f_hi = f(hi);
    if f_lo.abs() < tol {
        return Ok(Root { x: lo, iterations: 0, converged: true });
    }
    if f_hi.abs() < tol {
        return Ok(Root { x: hi, iterations: 0, converged: true });
    }
    if f_lo.signum() == f_hi.signum() || !f_lo.is_finite() || !f_hi.is_finite() {
        return Err(EstimateError::NoBracket { lo, hi });
    }

    let mut x = if start > lo && start < hi { start } else { 0.5 * (lo + hi) };
    for iter in 1..=max_iter {
        let fx = f(x);
        if fx.abs() < tol {
            return Ok(Root { x, iterations: iter, converged: true });
        }
        if fx.signum() == f_lo.signum() {
            lo = x;
            f_lo = fx;
        } else {
            hi = x;
        }
        if hi - lo < 1e-13 {
            return Ok(Root { x, iterations: iter, converged: true });
        }
        let h = 1e-6 * x.abs().max(1.0);
        let slope = (f(x + h) - f(x - h)) / (2.0 * h);
        let step = x - fx / slope;
        x = if slope.is_finite() && slope != 0.0 && step > lo && step < hi {
            step
        } else {
            0.5 * (lo + hi)
        };
    }
    Ok(Root { x, iterations: max_iter, converged: false })
}

fn se_from_information(info: f64) -> f64 {
    if info > 0.0 && info.is_finite() {
        1.0 / info.sqrt()
    } else {
        f64::INFINITY
    }
}

// ---------------------------------------------------------------------------
// pattern-level estimators
// ---------------------------------------------------------------------------

pub fn eap(
    pattern: &ScoredPattern<'_>,
    prior: &Prior,
    grid: &QuadratureGrid,
    bounds: &Bounds,
) -> Result<AbilityEstimate, EstimateError> {
    prior.check()?;
    if pattern.is_empty() {
        return Ok(AbilityEstimate {
            theta: prior.mean,
            se: prior.sd,
            method: Method::Eap,
            converged: true,
            iterations: 0,
        });
    }
    let log_post: Vec<f64> = grid
        .nodes()
        .iter()
        .zip(grid.weights())
        .map(|(&t, &w)| pattern.log_likelihood(t) + prior.ln_density(t) + w.ln())
        .collect();
    let peak = log_post.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !peak.is_finite() {
        return Err(EstimateError::DegenerateGrid);
    }
    let mass: Vec<f64> = log_post.iter().map(|lp| (lp - peak).exp()).collect();
    let total: f64 = mass.iter().sum();
    if !(total > 0.0) {
        return Err(EstimateError::DegenerateGrid);
    }
    let mean = grid
        .nodes()
        .iter()
        .zip(&mass)
        .map(|(t, m)| t * m)
        .sum::<f64>()
        / total;
    let var = grid
        .nodes()
        .iter()
        .zip(&mass)
        .map(|(t, m)| (t - mean) * (t - mean) * m)
        .sum::<f64>()
        / total;
    let se = var.sqrt();
    if !(se > 0.0) {
        return Err(EstimateError::DegenerateGrid);
    }
    Ok(AbilityEstimate {
        theta: bounds.clamp(mean),
        se,
        method: Method::Eap,
        converged: true,
        iterations: 0,
    })
}

pub fn ml(pattern: &ScoredPattern<'_>, bounds: &Bounds) -> Result<AbilityEstimate, EstimateError> {
    if pattern.is_empty() {
        return Err(EstimateError::NoResponses);
    }
    if pattern.is_extreme() {
        return Err(EstimateError::NonFiniteMle);
    }
    let score = |t: f64| pattern.score(t);
    Ok(newton_estimate(score, 0.0, bounds, Method::Ml, |t| {
        se_from_information(pattern.information(t))
    }))
}

pub fn map(
    pattern: &ScoredPattern<'_>,
    prior: &Prior,
    bounds: &Bounds,
) -> Result<AbilityEstimate, EstimateError> {
    prior.check()?;
    let precision = 1.0 / (prior.sd * prior.sd);
    let penalized = |t: f64| pattern.score(t) - (t - prior.mean) * precision;
    Ok(newton_estimate(
        penalized,
        bounds.clamp(prior.mean),
        bounds,
        Method::Map,
        |t| se_from_information(pattern.information(t) + precision),
    ))
}

/// Sum of the derivatives of the item informations at `theta`.
fn information_slope(pattern: &ScoredPattern<'_>, theta: f64) -> f64 {
    let h = 1e-5;
    (pattern.information(theta + h) - pattern.information(theta - h)) / (2.0 * h)
}

/// Warm's weighted score `S(theta) + J(theta) / (2 I(theta))`.
pub fn weighted_score(pattern: &ScoredPattern<'_>, theta: f64) -> f64 {
    let info = pattern.information(theta);
    pattern.score(theta) + information_slope(pattern, theta) / (2.0 * info)
}

pub fn wle(pattern: &ScoredPattern<'_>, bounds: &Bounds) -> Result<AbilityEstimate, EstimateError> {
    if pattern.is_empty() {
        return Err(EstimateError::NoResponses);
    }
    let root = safeguarded_newton(
        |t| weighted_score(pattern, t),
        bounds.lo,
        bounds.hi,
        0.0,
        SCORE_TOLERANCE,
        MAX_ITERATIONS,
    )?;
    Ok(AbilityEstimate {
        theta: root.x,
        se: se_from_information(pattern.information(root.x)),
        method: Method::Wle,
        converged: root.converged,
        iterations: root.iterations,
    })
}

fn newton_estimate<F, S>(
    f: F,
    start: f64,
    bounds: &Bounds,
    method: Method,
    se_at: S,
) -> AbilityEstimate
where
    F: Fn(f64) -> f64,
    S: Fn(f64) -> f64,
{
    match safeguarded_newton(&f, bounds.lo, bounds.hi, start, SCORE_TOLERANCE, MAX_ITERATIONS) {
        Ok(root) => AbilityEstimate {
            theta: root.x,
            se: se_at(root.x),
            method,
            converged: root.converged,
            iterations: root.iterations,
        },
        // The root lies outside the bounds: report the nearer bound as a
        // non-converged estimate so the fallback chain moves on.
        Err(_) => {
            let theta = if f(bounds.hi) > 0.0 { bounds.hi } else { bounds.lo };
            AbilityEstimate {
                theta,
                se: se_at(theta),
                method,
                converged: false,
                iterations: 0,
            }
        }
    }
}

// ---------------------------------------------------------------------------
// item/response level API
// ---------------------------------------------------------------------------

pub fn estimate_eap(
    items: &[Item],
    responses: &[Response],
    prior: &Prior,
    grid: &QuadratureGrid,
) -> Result<AbilityEstimate, EstimateError> {
    eap(&ScoredPattern::new(items, responses)?, prior, grid, &Bounds::default())
}

pub fn estimate_ml(
    items: &[Item],
    responses: &[Response],
    bounds: &Bounds,
) -> Result<AbilityEstimate, EstimateError> {
    ml(&ScoredPattern::new(items, responses)?, bounds)
}

pub fn estimate_map(
    items: &[Item],
    responses: &[Response],
    prior: &Prior,
) -> Result<AbilityEstimate, EstimateError> {
    map(&ScoredPattern::new(items, responses)?, prior, &Bounds::default())
}

pub fn estimate_wle(items: &[Item], responses: &[Response]) -> Result<AbilityEstimate, EstimateError> {
    wle(&ScoredPattern::new(items, responses)?, &Bounds::default())
}

/// Estimator settings shared by a study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationConfig {
    pub method: Method,
    #[serde(default)]
    pub alternate: Option<Method>,
    #[serde(default)]
    pub prior: Prior,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub bounds: Bounds,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        EstimationConfig {
            method: Method::Eap,
            alternate: None,
            prior: Prior::default(),
            grid: GridSpec::default(),
            bounds: Bounds::default(),
        }
    }
}

/// An [`EstimationConfig`] with its grid materialized.
#[derive(Debug, Clone)]
pub struct Estimator {
    pub config: EstimationConfig,
    pub grid: QuadratureGrid,
}

impl Estimator {
    pub fn new(config: EstimationConfig) -> Result<Self, EstimateError> {
        config.prior.check()?;
        let grid = config.grid.build()?;
        Ok(Estimator { config, grid })
    }

    pub fn run(&self, method: Method, pattern: &ScoredPattern<'_>) -> Result<AbilityEstimate, EstimateError> {
        let c = &self.config;
        match method {
            Method::Eap => eap(pattern, &c.prior, &self.grid, &c.bounds),
            Method::Map => map(pattern, &c.prior, &c.bounds),
            Method::Ml => ml(pattern, &c.bounds),
            Method::Wle => wle(pattern, &c.bounds),
        }
    }

    /// Primary method, then the alternate, then EAP; the first estimate that
    /// converged to a finite value inside the bounds wins. EAP closes the
    /// chain whatever its outcome.
    pub fn fallback_chain(&self, pattern: &ScoredPattern<'_>) -> AbilityEstimate {
        let c = &self.config;
        let mut chain = vec![c.method];
        if let Some(alt) = c.alternate {
            chain.push(alt);
        }
        for method in chain.into_iter().filter(|m| *m != Method::Eap) {
            if let Ok(est) = self.run(method, pattern) {
                if acceptable(&est, &c.bounds) {
                    return est;
                }
            }
        }
        match eap(pattern, &c.prior, &self.grid, &c.bounds) {
            Ok(est) => est,
            Err(_) => AbilityEstimate {
                theta: c.prior.mean,
                se: c.prior.sd,
                method: Method::Eap,
                converged: false,
                iterations: 0,
            },
        }
    }
}

fn acceptable(est: &AbilityEstimate, bounds: &Bounds) -> bool {
    est.converged
        && est.theta.is_finite()
        && bounds.contains(est.theta)
        && est.se.is_finite()
        && est.se > 0.0
}

/// Runs the fallback chain over `items`/`responses` for a study's settings.
pub fn fallback_chain(
    config: &EstimationConfig,
    items: &[Item],
    responses: &[Response],
) -> Result<AbilityEstimate, EstimateError> {
    let est = Estimator::new(config.clone())?;
    let pattern = ScoredPattern::new(items, responses)?;
    Ok(est.fallback_chain(&pattern))
}
