//! Statistical helpers shared by the integration tests.
#![allow(dead_code)]

use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Kolmogorov survival function Q(λ) = 2 Σ (-1)^(k-1) exp(-2 k² λ²).
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..200 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// Two-sample KS statistic D.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

/// Asymptotic two-sample KS p-value with effective sizes `na`, `nb`.
pub fn ks_p_value(d: f64, na: f64, nb: f64) -> f64 {
    let ne = na * nb / (na + nb);
    let s = ne.sqrt();
    kolmogorov_q((s + 0.12 + 0.11 / s) * d)
}

pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    ks_p_value(ks_statistic(a, b), a.len() as f64, b.len() as f64)
}

/// Effective sample size by Geyer's initial monotone sequence.
pub fn ess(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return n as f64;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    if var == 0.0 {
        return n as f64;
    }
    let acf = |lag: usize| -> f64 {
        (0..n - lag).map(|t| (x[t] - mean) * (x[t + lag] - mean)).sum::<f64>() / (n as f64 * var)
    };
    let mut tau = -1.0;
    let mut prev = f64::INFINITY;
    let mut k = 0;
    while 2 * k + 1 < n {
        let pair = acf(2 * k) + acf(2 * k + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev);
        tau += 2.0 * pair;
        prev = pair;
        k += 1;
    }
    (n as f64 / tau.max(1.0)).min(n as f64)
}

/// KS p-value for an autocorrelated MCMC sample against independent reference draws.
pub fn ks_mcmc_vs_iid(chain: &[f64], reference: &[f64]) -> f64 {
    let d = ks_statistic(chain, reference);
    ks_p_value(d, ess(chain), reference.len() as f64)
}

/// Pearson goodness-of-fit p-value; `scale` shrinks the counts to an effective size.
pub fn chi_square_gof(observed: &[f64], probs: &[f64], scale: f64) -> f64 {
    let n: f64 = observed.iter().sum();
    let stat: f64 = observed
        .iter()
        .zip(probs)
        .filter(|(_, p)| **p > 0.0)
        .map(|(o, p)| (o - n * p).powi(2) / (n * p))
        .sum::<f64>()
        * scale;
    let df = probs.iter().filter(|p| **p > 0.0).count() as f64 - 1.0;
    1.0 - ChiSquared::new(df).unwrap().cdf(stat)
}

/// Two-sample chi-square homogeneity p-value on count vectors over the same
/// categories, with sample `a` shrunk by `scale_a` to its effective size.
pub fn chi_square_two_sample(a: &[f64], b: &[f64], scale_a: f64) -> f64 {
    let a: Vec<f64> = a.iter().map(|v| v * scale_a).collect();
    let (na, nb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    let mut stat = 0.0;
    let mut cells = 0;
    for (x, y) in a.iter().zip(b) {
        let tot = x + y;
        if tot == 0.0 {
            continue;
        }
        cells += 1;
        let ex = tot * na / (na + nb);
        let ey = tot * nb / (na + nb);
        stat += (x - ex).powi(2) / ex + (y - ey).powi(2) / ey;
    }
    if cells < 2 {
        return 1.0;
    }
    1.0 - ChiSquared::new((cells - 1) as f64).unwrap().cdf(stat)
}

/// Merges trailing categories so every bin of `reference` holds at least `min` counts.
pub fn pool_tail(a: &[f64], reference: &[f64], min: f64) -> (Vec<f64>, Vec<f64>) {
    let mut out_a = vec![];
    let mut out_b = vec![];
    let (mut acc_a, mut acc_b) = (0.0, 0.0);
    for (x, y) in a.iter().zip(reference) {
        acc_a += x;
        acc_b += y;
        if acc_b >= min {
            out_a.push(acc_a);
            out_b.push(acc_b);
            acc_a = 0.0;
            acc_b = 0.0;
        }
    }
    if let (Some(la), Some(lb)) = (out_a.last_mut(), out_b.last_mut()) {
        *la += acc_a;
        *lb += acc_b;
    }
    (out_a, out_b)
}
