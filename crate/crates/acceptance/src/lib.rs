//! Reference computations for the acceptance suite.
//!
//! Everything here is written from the model definitions and shares no
//! numerical code with `adaptcat-core`; only the item record is borrowed.
//! The routines favour brute force over speed.

use adaptcat_core::{Item, Model, Response};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Boundary curves `P*_0 = 1 > P*_1 > ... > P*_m = 0` and their slopes;
/// only the slopes are used.
fn boundaries(item: &Item, theta: f64) -> Vec<(f64, f64)> {
    let mut out = vec![(1.0, 0.0)];
    match item.model {
        Model::Grm => {
            for &b in &item.thresholds {
                let s = sigmoid(item.a * (theta - b));
                out.push((s, item.a * s * (1.0 - s)));
            }
        }
        _ => {
            let a = if item.model == Model::OnePl { 1.0 } else { item.a };
            let c = if item.model == Model::ThreePl { item.c } else { 0.0 };
            let l = sigmoid(a * (theta - item.b));
            out.push((c + (1.0 - c) * l, (1.0 - c) * a * l * (1.0 - l)));
        }
    }
    out.push((0.0, 0.0));
    out
}

/// Category probabilities `P_0 .. P_m`.
///
/// Adjacent GRM boundaries are differenced as
/// `σ(u) - σ(v) = σ(u) σ(-v) (1 - e^(v-u))`, which keeps full relative
/// precision in the tails where both curves sit near 0 or 1.
pub fn probabilities(item: &Item, theta: f64) -> Vec<f64> {
    match item.model {
        Model::Grm => {
            let mut x = vec![f64::INFINITY];
            x.extend(item.thresholds.iter().map(|b| item.a * (theta - b)));
            x.push(f64::NEG_INFINITY);
            x.windows(2)
                .map(|w| sigmoid(w[0]) * sigmoid(-w[1]) * -(w[1] - w[0]).exp_m1())
                .collect()
        }
        _ => {
            let a = if item.model == Model::OnePl { 1.0 } else { item.a };
            let c = if item.model == Model::ThreePl { item.c } else { 0.0 };
            let x = a * (theta - item.b);
            vec![(1.0 - c) * sigmoid(-x), c + (1.0 - c) * sigmoid(x)]
        }
    }
}

/// `dP_k / dθ` for every category.
pub fn slopes(item: &Item, theta: f64) -> Vec<f64> {
    boundaries(item, theta).windows(2).map(|w| w[0].1 - w[1].1).collect()
}

/// Fisher information `Σ_k P_k'^2 / P_k`.
pub fn information(item: &Item, theta: f64) -> f64 {
    probabilities(item, theta)
        .into_iter()
        .zip(slopes(item, theta))
        .filter(|(p, _)| *p > 0.0)
        .map(|(p, d)| d * d / p)
        .sum()
}

pub fn test_information(items: &[Item], theta: f64) -> f64 {
    items.iter().map(|i| information(i, theta)).sum()
}

fn find<'a>(items: &'a [Item], id: &str) -> &'a Item {
    items.iter().find(|i| i.id == id).expect("response to a known item")
}

pub fn log_likelihood(items: &[Item], responses: &[Response], theta: f64) -> f64 {
    responses
        .iter()
        .map(|r| probabilities(find(items, &r.item_id), theta)[r.value as usize].ln())
        .sum()
}

/// Information of the items actually answered.
pub fn pattern_information(items: &[Item], responses: &[Response], theta: f64) -> f64 {
    responses.iter().map(|r| information(find(items, &r.item_id), theta)).sum()
}

/// Global maximizer of `f` on `[lo, hi]`: a 0.01 scan, then a 1e-5 scan
/// around the best coarse point.
pub fn argmax(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let scan = |a: f64, b: f64, n: usize| {
        let mut best = (a, f64::NEG_INFINITY);
        for i in 0..=n {
            let x = a + (b - a) * i as f64 / n as f64;
            let y = f(x);
            if y > best.1 {
                best = (x, y);
            }
        }
        best.0
    };
    let coarse = scan(lo, hi, ((hi - lo) / 0.01).round() as usize);
    let (a, b) = ((coarse - 0.01).max(lo), (coarse + 0.01).min(hi));
    scan(a, b, ((b - a) / 1e-5).round() as usize)
}

/// Every sign change of `f` on `[lo, hi]` found on a 0.01 scan, each
/// bisected to machine precision.
pub fn roots(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> Vec<f64> {
    let n = ((hi - lo) / 0.01).round() as usize;
    let mut out = Vec::new();
    let mut prev = (lo, f(lo));
    for i in 1..=n {
        let x = lo + (hi - lo) * i as f64 / n as f64;
        let y = f(x);
        if prev.1 == 0.0 {
            out.push(prev.0);
        } else if prev.1.signum() != y.signum() && y != 0.0 {
            let (mut a, mut b, fa) = (prev.0, x, prev.1);
            for _ in 0..200 {
                let m = 0.5 * (a + b);
                if m <= a || m >= b {
                    break;
                }
                if f(m).signum() == fa.signum() {
                    a = m;
                } else {
                    b = m;
                }
            }
            out.push(0.5 * (a + b));
        }
        prev = (x, y);
    }
    out
}

/// Maximum likelihood estimate over `[lo, hi]`.
pub fn ml(items: &[Item], responses: &[Response], lo: f64, hi: f64) -> f64 {
    argmax(|t| log_likelihood(items, responses, t), lo, hi)
}

/// Posterior mode under a normal prior.
pub fn map(items: &[Item], responses: &[Response], mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    argmax(
        |t| log_likelihood(items, responses, t) - 0.5 * ((t - mean) / sd).powi(2),
        lo,
        hi,
    )
}

/// Roots of the weighted score `d/dθ ℓ + I'/(2I)`. The score is the
/// derivative of [`log_likelihood`] summed from [`slopes`]; `I'` is a
/// central difference of [`pattern_information`].
pub fn wle(items: &[Item], responses: &[Response], lo: f64, hi: f64) -> Vec<f64> {
    let h = 1e-4;
    let f = |t: f64| {
        let score: f64 = responses
            .iter()
            .map(|r| {
                let item = find(items, &r.item_id);
                let k = r.value as usize;
                slopes(item, t)[k] / probabilities(item, t)[k]
            })
            .sum();
        let info = pattern_information(items, responses, t);
        let d = (pattern_information(items, responses, t + h) - pattern_information(items, responses, t - h)) / (2.0 * h);
        score + d / (2.0 * info)
    };
    roots(f, lo, hi)
}

/// Integrates `f` over `[lo, hi]` with composite Simpson on `n` points
/// (`n` odd).
pub fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    assert!(n >= 3 && n % 2 == 1);
    let h = (hi - lo) / (n - 1) as f64;
    let mut sum = 0.0;
    for i in 0..n {
        let w = if i == 0 || i == n - 1 {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        sum += w * f(lo + h * i as f64);
    }
    sum * h / 3.0
}

/// Posterior mean and sd under a normal prior on `[lo, hi]`, by Simpson
/// quadrature on `n` points (`n` odd).
pub fn eap(items: &[Item], responses: &[Response], mean: f64, sd: f64, lo: f64, hi: f64, n: usize) -> (f64, f64) {
    assert!(n >= 3 && n % 2 == 1);
    let h = (hi - lo) / (n - 1) as f64;
    let nodes: Vec<f64> = (0..n).map(|i| lo + h * i as f64).collect();
    let log_post: Vec<f64> = nodes
        .iter()
        .map(|&t| log_likelihood(items, responses, t) - 0.5 * ((t - mean) / sd).powi(2))
        .collect();
    let peak = log_post.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_post.iter().map(|l| (l - peak).exp()).collect();
    let rule = |i: usize| match i {
        0 => 1.0,
        i if i == n - 1 => 1.0,
        i if i % 2 == 1 => 4.0,
        _ => 2.0,
    };
    let integrate = |g: &dyn Fn(usize) -> f64| (0..n).map(|i| rule(i) * g(i)).sum::<f64>();
    let z = integrate(&|i| w[i]);
    let m = integrate(&|i| nodes[i] * w[i]) / z;
    let v = integrate(&|i| (nodes[i] - m).powi(2) * w[i]) / z;
    (m, v.sqrt())
}

fn std_normal_density(t: f64) -> f64 {
    (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Sum of the `length` largest item informations at `theta`: the most
/// Fisher information any selection rule can collect there.
pub fn best_information(items: &[Item], length: usize, theta: f64) -> f64 {
    let mut info: Vec<f64> = items.iter().map(|i| information(i, theta)).collect();
    info.sort_by(|a, b| b.total_cmp(a));
    info.iter().take(length).sum()
}

/// Lower bound on the RMSE of any estimator under any item selection rule
/// with `length` items, for θ ~ N(0, 1).
///
/// By the van Trees inequality the Bayes risk is at least
/// `1 / (E[I(θ)] + 1)`, the `1` being the prior's information. A
/// sequential design's Fisher information at θ never exceeds
/// [`best_information`], so the bound uses that.
pub fn rmse_lower_bound(items: &[Item], length: usize) -> f64 {
    let expected = simpson(
        |t| best_information(items, length, t) * std_normal_density(t),
        -8.0,
        8.0,
        801,
    );
    (1.0 / (expected + 1.0)).sqrt()
}
