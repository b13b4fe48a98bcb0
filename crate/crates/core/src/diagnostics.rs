//! Convergence diagnostics: total-variation bounds from lagged meeting times,
//! meeting-time survival curves, and the average standard deviation of split
//! frequencies (ASDSF) as a classical comparator.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::chains::MeetingRecord;
use crate::tree::{parse_newick, Split};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagError {
    #[error("no meeting times")]
    Empty,
    #[error("meeting time {tau} is below the lag {lag}")]
    TauBelowLag { tau: u64, lag: u64 },
    #[error("lag must be positive")]
    ZeroLag,
    #[error("need at least two chains, got {0}")]
    TooFewChains(usize),
    #[error("chains have different lengths")]
    Misaligned,
    #[error("bad tree in sample {index}: {message}")]
    Tree { index: usize, message: String },
}

fn check_taus(taus: &[u64], lag: u64) -> Result<(), DiagError> {
    if lag == 0 {
        return Err(DiagError::ZeroLag);
    }
    if taus.is_empty() {
        return Err(DiagError::Empty);
    }
    if let Some(&tau) = taus.iter().find(|&&t| t < lag) {
        return Err(DiagError::TauBelowLag { tau, lag });
    }
    Ok(())
}

/// max(0, ⌈(τ − l − s)/l⌉) for one pair.
pub fn tv_integrand(tau: u64, lag: u64, s: u64) -> u64 {
    let excess = tau.saturating_sub(lag).saturating_sub(s);
    excess.div_ceil(lag)
}

/// Monte Carlo estimate of the upper bound on the total variation distance
/// between the chain at iteration `s` and its target.
pub fn tv_bound(taus: &[u64], lag: u64, s: u64) -> Result<f64, DiagError> {
    check_taus(taus, lag)?;
    let total: u64 = taus.iter().map(|&t| tv_integrand(t, lag, s)).sum();
    Ok(total as f64 / taus.len() as f64)
}

/// Bound estimates over a grid of iterations for one lag.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TvCurve {
    pub lag: u64,
    pub s: Vec<u64>,
    pub bound: Vec<f64>,
    /// Sample variance of the integrand at each grid point.
    pub variance: Vec<f64>,
    pub n_pairs: usize,
    /// Pairs that never met; their τ is only a lower bound, so the curve is too.
    pub n_censored: usize,
    /// Percentile bootstrap band (2.5%, 97.5%), when requested.
    pub band: Option<Vec<(f64, f64)>>,
}

impl TvCurve {
    pub fn censored(&self) -> bool {
        self.n_censored > 0
    }

    /// Bound at `s`, which is zero past the end of the grid.
    pub fn at(&self, s: u64) -> f64 {
        match self.s.binary_search(&s) {
            Ok(i) => self.bound[i],
            Err(i) if i >= self.s.len() => 0.0,
            Err(i) => self.bound[i.saturating_sub(1)],
        }
    }

    fn variance_at(&self, s: u64) -> f64 {
        match self.s.binary_search(&s) {
            Ok(i) => self.variance[i],
            Err(i) if i >= self.s.len() => 0.0,
            Err(i) => self.variance[i.saturating_sub(1)],
        }
    }

    /// First grid point where the bound falls below `threshold`.
    pub fn first_below(&self, threshold: f64) -> Option<u64> {
        self.s.iter().zip(&self.bound).find(|(_, b)| **b < threshold).map(|(s, _)| *s)
    }
}

/// Builds the curve on the grid 0, stride, 2·stride, … up to max(τ) − l.
pub fn tv_curve(records: &[MeetingRecord], lag: u64, stride: u64) -> Result<TvCurve, DiagError> {
    let taus: Vec<u64> = records.iter().filter(|r| r.lag == lag).map(|r| r.tau).collect();
    check_taus(&taus, lag)?;
    let n_censored = records.iter().filter(|r| r.lag == lag && r.censored).count();
    let stride = stride.max(1);
    let last = taus.iter().max().unwrap() - lag;
    let m = taus.len() as f64;
    let mut s_grid = vec![];
    let mut bound = vec![];
    let mut variance = vec![];
    let mut s = 0;
    loop {
        let vals: Vec<f64> = taus.iter().map(|&t| tv_integrand(t, lag, s) as f64).collect();
        let mean = vals.iter().sum::<f64>() / m;
        let var = if taus.len() > 1 { vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0) } else { 0.0 };
        s_grid.push(s);
        bound.push(mean);
        variance.push(var);
        if s >= last {
            break;
        }
        s += stride;
    }
    Ok(TvCurve { lag, s: s_grid, bound, variance, n_pairs: taus.len(), n_censored, band: None })
}

/// Adds a percentile bootstrap band from `resamples` resamples of the pairs.
pub fn bootstrap_band<R: Rng + ?Sized>(curve: &mut TvCurve, taus: &[u64], resamples: usize, rng: &mut R) {
    let m = taus.len();
    let mut draws = vec![Vec::with_capacity(resamples); curve.s.len()];
    for _ in 0..resamples {
        let sample: Vec<u64> = (0..m).map(|_| taus[rng.random_range(0..m)]).collect();
        for (k, &s) in curve.s.iter().enumerate() {
            let total: u64 = sample.iter().map(|&t| tv_integrand(t, curve.lag, s)).sum();
            draws[k].push(total as f64 / m as f64);
        }
    }
    let band = draws
        .into_iter()
        .map(|mut d| {
            d.sort_by(f64::total_cmp);
            let q = |p: f64| d[((p * (d.len() - 1) as f64).round() as usize).min(d.len() - 1)];
            (q(0.025), q(0.975))
        })
        .collect();
    curve.band = Some(band);
}

/// Empirical survival P̂(τ − l > s) at s = 0 and at every observed value of τ − l.
pub fn ecdf_survival(taus: &[u64], lag: u64) -> Result<Vec<(u64, f64)>, DiagError> {
    check_taus(taus, lag)?;
    let mut excess: Vec<u64> = taus.iter().map(|t| t - lag).collect();
    excess.sort_unstable();
    let n = excess.len() as f64;
    let mut points: BTreeSet<u64> = excess.iter().copied().collect();
    points.insert(0);
    Ok(points
        .into_iter()
        .map(|s| {
            let above = excess.len() - excess.partition_point(|&e| e <= s);
            (s, above as f64 / n)
        })
        .collect())
}

/// Least-squares line through (s, ln P̂(τ − l > s)).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TailFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n_points: usize,
}

/// Fits the log-survival over the upper half of the meeting-time sample: the
/// survival points at or above the median of τ − l with nonzero survival.
/// A geometric tail shows up as a straight line with slope ln(1 − p).
pub fn geometric_tail_fit(taus: &[u64], lag: u64) -> Result<Option<TailFit>, DiagError> {
    let surv = ecdf_survival(taus, lag)?;
    let mut excess: Vec<u64> = taus.iter().map(|t| t - lag).collect();
    excess.sort_unstable();
    let median = excess[(excess.len() - 1) / 2];
    let pts: Vec<(f64, f64)> =
        surv.iter().filter(|(s, p)| *s >= median && *p > 0.0).map(|&(s, p)| (s as f64, p.ln())).collect();
    Ok(linear_fit(&pts))
}

fn linear_fit(pts: &[(f64, f64)]) -> Option<TailFit> {
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some(TailFit { slope, intercept: my - slope * mx, r_squared, n_points: pts.len() })
}

/// Which samples enter the split frequencies at a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum WindowRule {
    /// The most recent `fraction` of the samples so far (MrBayes uses 0.75).
    Trailing { fraction: f64 },
    /// Consecutive non-overlapping windows of `size` samples.
    Disjoint { size: usize },
}

impl Default for WindowRule {
    fn default() -> Self {
        WindowRule::Trailing { fraction: 0.75 }
    }
}

impl WindowRule {
    /// Half-open sample range for a window ending at `end`.
    pub fn window(&self, end: usize) -> (usize, usize) {
        match *self {
            WindowRule::Trailing { fraction } => {
                let len = ((end as f64) * fraction).ceil() as usize;
                (end - len.min(end), end)
            }
            WindowRule::Disjoint { size } => (end.saturating_sub(size.max(1)), end),
        }
    }

    /// Window ends for `n` samples, one every `every` samples.
    pub fn checkpoints(&self, n: usize, every: usize) -> Vec<usize> {
        let step = match *self {
            WindowRule::Trailing { .. } => every.max(1),
            WindowRule::Disjoint { size } => size.max(1),
        };
        (1..=n / step).map(|k| k * step).collect()
    }
}

pub const DEFAULT_MIN_FREQ: f64 = 0.1;

/// Split frequencies per chain over one window.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitFrequencyTable {
    pub n_chains: usize,
    /// Frequency of each split in each chain.
    pub freqs: BTreeMap<Split, Vec<f64>>,
}

impl SplitFrequencyTable {
    /// Tabulates the window `[lo, hi)` of every chain.
    pub fn from_window(chains: &[Vec<BTreeSet<Split>>], lo: usize, hi: usize) -> Self {
        let m = chains.len();
        let mut freqs: BTreeMap<Split, Vec<f64>> = BTreeMap::new();
        let len = (hi - lo) as f64;
        for (c, chain) in chains.iter().enumerate() {
            for sample in &chain[lo..hi] {
                for split in sample {
                    freqs.entry(split.clone()).or_insert_with(|| vec![0.0; m])[c] += 1.0;
                }
            }
        }
        for f in freqs.values_mut() {
            f.iter_mut().for_each(|v| *v /= len);
        }
        SplitFrequencyTable { n_chains: m, freqs }
    }

    pub fn asdsf(&self, min_freq: f64) -> AsdsfValue {
        asdsf_from_frequencies(self.freqs.values().map(|v| v.as_slice()), min_freq)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AsdsfValue {
    pub value: f64,
    pub n_splits: usize,
    /// True when every split was filtered out; the value is then 0.
    pub no_splits: bool,
}

/// Mean across splits of the across-chain sample standard deviation, ignoring
/// splits whose frequency is at most `min_freq` in every chain.
pub fn asdsf_from_frequencies<'a>(splits: impl IntoIterator<Item = &'a [f64]>, min_freq: f64) -> AsdsfValue {
    let mut sum = 0.0;
    let mut k = 0;
    for f in splits {
        if f.iter().all(|&v| v <= min_freq) {
            continue;
        }
        let m = f.len() as f64;
        let mean = f.iter().sum::<f64>() / m;
        sum += (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
        k += 1;
    }
    if k == 0 {
        return AsdsfValue { value: 0.0, n_splits: 0, no_splits: true };
    }
    AsdsfValue { value: sum / k as f64, n_splits: k, no_splits: false }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AsdsfPoint {
    /// Number of samples per chain seen so far.
    pub window_end: usize,
    pub value: f64,
    pub n_splits: usize,
    pub no_splits: bool,
}

/// ASDSF series over checkpoints every `every` samples.
pub fn asdsf(
    chains: &[Vec<BTreeSet<Split>>],
    rule: WindowRule,
    every: usize,
    min_freq: f64,
) -> Result<Vec<AsdsfPoint>, DiagError> {
    if chains.len() < 2 {
        return Err(DiagError::TooFewChains(chains.len()));
    }
    let n = chains[0].len();
    if chains.iter().any(|c| c.len() != n) {
        return Err(DiagError::Misaligned);
    }
    Ok(rule
        .checkpoints(n, every)
        .into_iter()
        .map(|end| {
            let (lo, hi) = rule.window(end);
            let v = SplitFrequencyTable::from_window(chains, lo, hi).asdsf(min_freq);
            AsdsfPoint { window_end: end, value: v.value, n_splits: v.n_splits, no_splits: v.no_splits }
        })
        .collect())
}

/// Split sets of a sequence of Newick trees, with leaves indexed by the sorted taxon names.
pub fn split_sets<'a>(newicks: impl IntoIterator<Item = &'a str>) -> Result<Vec<BTreeSet<Split>>, DiagError> {
    let mut order: Option<Vec<String>> = None;
    newicks
        .into_iter()
        .enumerate()
        .map(|(index, text)| {
            let bad = |message: String| DiagError::Tree { index, message };
            let t = parse_newick(text).map_err(|e| bad(e.to_string()))?;
            let names = order.get_or_insert_with(|| {
                let mut v = t.taxa().to_vec();
                v.sort();
                v
            });
            let t = t.with_taxa_order(names).map_err(|e| bad(e.to_string()))?;
            Ok(t.splits())
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Thresholds {
    /// TV bound regarded as converged.
    pub tv: f64,
    /// ASDSF regarded as converged.
    pub asdsf: f64,
    /// Width of the agreement band between lags, in standard errors.
    pub band_sigmas: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { tv: 0.05, asdsf: 0.01, band_sigmas: 3.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LagSummary {
    pub lag: u64,
    pub n_pairs: usize,
    pub n_censored: usize,
    pub n_errors: usize,
    pub mean_tau: f64,
    pub max_tau: u64,
    pub tv_at_zero: f64,
    pub first_below_tv: Option<u64>,
    pub tail_fit: Option<TailFit>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LagComparison {
    pub lags: (u64, u64),
    /// Largest |d̂₁(s) − d̂₂(s)| over the common grid.
    pub sup_difference: f64,
    /// Largest ratio of the difference to its band; at most 1 means agreement.
    pub max_band_ratio: f64,
    pub stable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AsdsfSummary {
    pub final_value: f64,
    pub first_below: Option<usize>,
    pub n_points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub thresholds: Thresholds,
    pub lags: Vec<LagSummary>,
    pub comparisons: Vec<LagComparison>,
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub asdsf: Option<AsdsfSummary>,
}

/// Compares two curves on their common grid. The band at `s` is `sigmas`
/// standard errors of the difference of the two pair means.
pub fn compare_curves(a: &TvCurve, b: &TvCurve, sigmas: f64) -> LagComparison {
    let grid: BTreeSet<u64> = a.s.iter().chain(&b.s).copied().collect();
    let mut sup: f64 = 0.0;
    let mut ratio: f64 = 0.0;
    for s in grid {
        let d = (a.at(s) - b.at(s)).abs();
        let se = (a.variance_at(s) / a.n_pairs as f64 + b.variance_at(s) / b.n_pairs as f64).sqrt();
        sup = sup.max(d);
        if d > 0.0 {
            ratio = ratio.max(if se > 0.0 { d / (sigmas * se) } else { f64::INFINITY });
        }
    }
    LagComparison { lags: (a.lag, b.lag), sup_difference: sup, max_band_ratio: ratio, stable: ratio <= 1.0 }
}

/// Merges the TV curves, meeting-time summaries and the optional ASDSF series.
pub fn convergence_report(
    records: &[MeetingRecord],
    curves: &[TvCurve],
    asdsf_series: &[AsdsfPoint],
    thresholds: Thresholds,
) -> ConvergenceReport {
    let mut warnings = vec![];
    let lags = curves
        .iter()
        .map(|c| {
            let recs: Vec<&MeetingRecord> = records.iter().filter(|r| r.lag == c.lag).collect();
            let taus: Vec<u64> = recs.iter().map(|r| r.tau).collect();
            let n_errors = recs.iter().filter(|r| r.error.is_some()).count();
            if c.n_censored > 0 {
                warnings.push(format!(
                    "WARNING: lag {}: {} of {} pairs did not meet; the TV curve is only a lower bound on the estimate",
                    c.lag, c.n_censored, c.n_pairs
                ));
            }
            if n_errors > 0 {
                warnings.push(format!("WARNING: lag {}: {} pairs aborted with an error", c.lag, n_errors));
            }
            LagSummary {
                lag: c.lag,
                n_pairs: c.n_pairs,
                n_censored: c.n_censored,
                n_errors,
                mean_tau: taus.iter().sum::<u64>() as f64 / taus.len().max(1) as f64,
                max_tau: taus.iter().copied().max().unwrap_or(0),
                tv_at_zero: c.bound.first().copied().unwrap_or(0.0),
                first_below_tv: c.first_below(thresholds.tv),
                tail_fit: geometric_tail_fit(&taus, c.lag).ok().flatten(),
            }
        })
        .collect();
    let comparisons = curves.windows(2).map(|w| compare_curves(&w[0], &w[1], thresholds.band_sigmas)).collect();
    let asdsf = (!asdsf_series.is_empty()).then(|| AsdsfSummary {
        final_value: asdsf_series.last().unwrap().value,
        first_below: asdsf_series.iter().find(|p| p.value < thresholds.asdsf).map(|p| p.window_end),
        n_points: asdsf_series.len(),
    });
    ConvergenceReport { thresholds, lags, comparisons, warnings, asdsf }
}
