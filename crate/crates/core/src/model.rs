//! Stochastic Dollo model: pattern likelihood, priors and forward simulation.
//!
//! Traits are born at rate λ along branches, die at rate μ, are copied at
//! speciations and registered at leaf `i` with probability ξ_i (missing
//! otherwise). A catastrophe advances the process on its branch by
//! `-ln(1-κ)/μ` time units. Integrating λ against its Gamma prior turns the
//! independent Poisson pattern counts into a Negative Multinomial.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Beta, Distribution, Poisson};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::tree::{CladeConstraint, Tree};

/// Gamma(shape, rate) hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

/// A scalar parameter: flat prior on `[lo, hi]` when it varies.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalarSpec {
    pub lo: f64,
    pub hi: f64,
    pub vary: bool,
}

impl ScalarSpec {
    pub fn fixed() -> Self {
        ScalarSpec { lo: 0.0, hi: f64::INFINITY, vary: false }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

/// Everything about the model that the sampler does not update.
#[derive(Clone, Debug, PartialEq)]
pub struct SdModel {
    pub lambda_prior: GammaPrior,
    pub rho_prior: GammaPrior,
    pub root_bound: f64,
    pub mu: ScalarSpec,
    pub kappa: ScalarSpec,
    pub vary_xi: bool,
    pub catastrophes: bool,
    /// Admissible age range per leaf; a degenerate range pins the leaf.
    pub leaf_ranges: Vec<(f64, f64)>,
    pub constraints: Vec<CladeConstraint>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("pattern data line {line}: {message}")]
    Data { line: usize, message: String },
}

impl SdModel {
    /// Fixed μ and κ, fixed ξ, no catastrophes, leaves pinned at age 0.
    pub fn basic(n_leaves: usize, root_bound: f64) -> Self {
        SdModel {
            lambda_prior: GammaPrior { shape: 0.001, rate: 0.001 },
            rho_prior: GammaPrior { shape: 1.5, rate: 5000.0 },
            root_bound,
            mu: ScalarSpec::fixed(),
            kappa: ScalarSpec::fixed(),
            vary_xi: false,
            catastrophes: false,
            leaf_ranges: vec![(0.0, 0.0); n_leaves],
            constraints: vec![],
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Invalid(m.into()));
        for g in [self.lambda_prior, self.rho_prior] {
            if !(g.shape > 0.0 && g.rate > 0.0 && g.shape.is_finite() && g.rate.is_finite()) {
                return bad("Gamma hyperparameters must be positive and finite");
            }
        }
        if !(self.root_bound > 0.0) {
            return bad("root bound must be positive");
        }
        if self.mu.vary && !(0.0 < self.mu.lo && self.mu.lo < self.mu.hi) {
            return bad("mu bounds need 0 < lo < hi");
        }
        if self.kappa.vary && !(0.0 <= self.kappa.lo && self.kappa.lo < self.kappa.hi && self.kappa.hi < 1.0) {
            return bad("kappa bounds need 0 <= lo < hi < 1");
        }
        if self.leaf_ranges.iter().any(|&(lo, hi)| !(lo <= hi && lo >= 0.0)) {
            return bad("leaf ranges need 0 <= lo <= hi");
        }
        Ok(())
    }
}

/// Per-branch catastrophe counts indexed by node label. The root entry is always 0.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CatastropheCounts {
    counts: Vec<u32>,
}

impl CatastropheCounts {
    pub fn zeros(n_nodes: usize) -> Self {
        CatastropheCounts { counts: vec![0; n_nodes] }
    }

    pub fn from_vec(counts: Vec<u32>) -> Self {
        CatastropheCounts { counts }
    }

    pub fn get(&self, i: usize) -> u32 {
        self.counts[i]
    }

    pub fn set(&mut self, i: usize, k: u32) {
        self.counts[i] = k;
    }

    pub fn total(&self) -> u32 {
        self.counts.iter().sum()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.counts
    }

    /// Applies a node relabelling `perm[old] = new`.
    pub fn permute(&self, perm: &[usize]) -> Self {
        let mut out = vec![0; self.counts.len()];
        for (old, &k) in self.counts.iter().enumerate() {
            out[perm[old]] = k;
        }
        CatastropheCounts { counts: out }
    }
}

/// The full sampler state.
#[derive(Clone, Debug, PartialEq)]
pub struct SdState {
    pub tree: Tree,
    pub mu: f64,
    pub kappa: f64,
    pub xi: Vec<f64>,
    pub cats: CatastropheCounts,
}

impl SdState {
    pub fn new(tree: Tree, mu: f64, kappa: f64) -> Self {
        let n = tree.n_leaves();
        let m = tree.n_nodes();
        SdState { tree, mu, kappa, xi: vec![1.0; n], cats: CatastropheCounts::zeros(m) }
    }

    /// Bitwise equality of every component, labels included.
    pub fn identical(&self, other: &SdState) -> bool {
        self.tree.identical(&other.tree)
            && self.mu.to_bits() == other.mu.to_bits()
            && self.kappa.to_bits() == other.kappa.to_bits()
            && self.xi.len() == other.xi.len()
            && self.xi.iter().zip(&other.xi).all(|(a, b)| a.to_bits() == b.to_bits())
            && self.cats == other.cats
    }

    /// Exact equality up to internal relabelling: same dated topology,
    /// same counts on corresponding branches, bitwise-equal scalars.
    pub fn same_state(&self, other: &SdState) -> bool {
        if self.mu.to_bits() != other.mu.to_bits()
            || self.kappa.to_bits() != other.kappa.to_bits()
            || self.xi.iter().zip(&other.xi).any(|(a, b)| a.to_bits() != b.to_bits())
            || self.cats.total() != other.cats.total()
        {
            return false;
        }
        if !crate::tree::tree_equal(&self.tree, &other.tree) {
            return false;
        }
        let n = self.tree.n_leaves();
        if (0..n).any(|i| self.cats.get(i) != other.cats.get(i)) {
            return false;
        }
        let oc = other.tree.clades();
        let sets = self.tree.leafsets();
        self.tree
            .internal_nodes()
            .all(|v| oc.get(&sets[v]).is_some_and(|&w| self.cats.get(v) == other.cats.get(w)))
    }
}

/// Registration of one trait at one leaf.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Obs {
    Absent = 0,
    Present = 1,
    Missing = 2,
}

impl Obs {
    fn symbol(self) -> char {
        match self {
            Obs::Absent => '0',
            Obs::Present => '1',
            Obs::Missing => '?',
        }
    }
}

/// Aggregated trait patterns over an ordered set of taxa.
#[derive(Clone, Debug, PartialEq)]
pub struct PatternData {
    taxa: Arc<Vec<String>>,
    patterns: Vec<Vec<Obs>>,
    counts: Vec<u64>,
}

impl PatternData {
    /// Aggregates patterns; unobservable patterns (no present entry) are dropped.
    pub fn from_patterns(taxa: Arc<Vec<String>>, rows: impl IntoIterator<Item = Vec<Obs>>) -> Self {
        let mut agg: BTreeMap<Vec<Obs>, u64> = BTreeMap::new();
        for r in rows {
            assert_eq!(r.len(), taxa.len(), "pattern width must match taxa");
            if r.contains(&Obs::Present) {
                *agg.entry(r).or_default() += 1;
            }
        }
        let (patterns, counts) = agg.into_iter().unzip();
        PatternData { taxa, patterns, counts }
    }

    pub fn from_counts(taxa: Arc<Vec<String>>, entries: impl IntoIterator<Item = (Vec<Obs>, u64)>) -> Self {
        let mut agg: BTreeMap<Vec<Obs>, u64> = BTreeMap::new();
        for (r, k) in entries {
            assert_eq!(r.len(), taxa.len(), "pattern width must match taxa");
            if k > 0 && r.contains(&Obs::Present) {
                *agg.entry(r).or_default() += k;
            }
        }
        let (patterns, counts) = agg.into_iter().unzip();
        PatternData { taxa, patterns, counts }
    }

    pub fn empty(taxa: Arc<Vec<String>>) -> Self {
        PatternData { taxa, patterns: vec![], counts: vec![] }
    }

    pub fn taxa(&self) -> &Arc<Vec<String>> {
        &self.taxa
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[Obs], u64)> {
        self.patterns.iter().map(|p| p.as_slice()).zip(self.counts.iter().copied())
    }

    /// N: the number of observed traits.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn count_of(&self, pattern: &[Obs]) -> u64 {
        self.patterns.iter().position(|p| p == pattern).map_or(0, |k| self.counts[k])
    }

    /// Reorders columns to follow `names`.
    pub fn with_taxa_order(&self, names: &[String]) -> Result<PatternData, ModelError> {
        let idx: Option<Vec<usize>> = names.iter().map(|n| self.taxa.iter().position(|t| t == n)).collect();
        let idx = match idx {
            Some(v) if names.len() == self.taxa.len() => v,
            _ => return Err(ModelError::Invalid("data and tree taxa differ".into())),
        };
        let entries = self.iter().map(|(p, k)| (idx.iter().map(|&j| p[j]).collect(), k));
        Ok(PatternData::from_counts(Arc::new(names.to_vec()), entries))
    }

    /// Parses tab-separated data: a header of taxon names, then one row per
    /// trait over `{0,1,?}`. Blank lines and lines starting with `#` are skipped.
    pub fn from_tsv(text: &str) -> Result<PatternData, ModelError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(k, l)| (k + 1, l.trim_end_matches('\r')))
            .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
        let (hline, header) = lines.next().ok_or(ModelError::Data { line: 1, message: "missing header".into() })?;
        let taxa: Vec<String> = header.split('\t').map(|s| s.trim().to_string()).collect();
        if taxa.len() < 2 || taxa.iter().any(|t| t.is_empty()) {
            return Err(ModelError::Data { line: hline, message: "header needs at least two nonempty taxon names".into() });
        }
        for (k, t) in taxa.iter().enumerate() {
            if taxa[..k].contains(t) {
                return Err(ModelError::Data { line: hline, message: format!("duplicate taxon '{t}'") });
            }
        }
        let mut rows = vec![];
        for (line, l) in lines {
            let cells: Vec<&str> = l.split('\t').map(str::trim).collect();
            if cells.len() != taxa.len() {
                return Err(ModelError::Data {
                    line,
                    message: format!("expected {} columns, found {}", taxa.len(), cells.len()),
                });
            }
            let row = cells
                .iter()
                .map(|c| match *c {
                    "0" => Ok(Obs::Absent),
                    "1" => Ok(Obs::Present),
                    "?" => Ok(Obs::Missing),
                    other => Err(ModelError::Data { line, message: format!("invalid symbol '{other}'") }),
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        Ok(PatternData::from_patterns(Arc::new(taxa), rows))
    }

    /// Writes one row per trait, patterns in sorted order.
    pub fn to_tsv(&self) -> String {
        let mut out = self.taxa.join("\t");
        out.push('\n');
        for (p, k) in self.iter() {
            let row: Vec<String> = p.iter().map(|o| o.symbol().to_string()).collect();
            let row = row.join("\t");
            for _ in 0..k {
                out.push_str(&row);
                out.push('\n');
            }
        }
        out
    }
}

impl fmt::Display for PatternData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (p, k) in self.iter() {
            let s: String = p.iter().map(|o| o.symbol()).collect();
            writeln!(f, "{s}\t{k}")?;
        }
        Ok(())
    }
}

/// Branch length after folding in `n_cat` catastrophes of strength `kappa`.
pub fn effective_length(delta: f64, n_cat: u32, mu: f64, kappa: f64) -> f64 {
    if n_cat == 0 {
        return delta;
    }
    delta + n_cat as f64 * (-(-kappa).ln_1p() / mu)
}

/// Per-branch survival terms shared by every pattern.
struct Branches {
    post: Vec<usize>,
    /// Effective length L_i.
    len: Vec<f64>,
    /// e^{-μ L_i}.
    surv: Vec<f64>,
    /// 1 - e^{-μ L_i}.
    death: Vec<f64>,
}

fn branches(state: &SdState) -> Branches {
    let t = &state.tree;
    let m = t.n_nodes();
    let mut len = vec![0.0; m];
    let mut surv = vec![1.0; m];
    let mut death = vec![0.0; m];
    for i in 0..m {
        if t.parent(i).is_some() {
            let l = effective_length(t.branch_length(i), state.cats.get(i), state.mu, state.kappa);
            len[i] = l;
            surv[i] = (-state.mu * l).exp();
            death[i] = -(-state.mu * l).exp_m1();
        }
    }
    Branches { post: t.postorder(), len, surv, death }
}

struct Scratch {
    up: Vec<f64>,
    down: Vec<f64>,
    outside: Vec<f64>,
}

fn pattern_expectation(state: &SdState, b: &Branches, pattern: &[Obs], s: &mut Scratch) -> f64 {
    let t = &state.tree;
    let mu = state.mu;
    for &v in &b.post {
        match t.children(v) {
            None => {
                let xi = state.xi[v];
                let (u, d) = match pattern[v] {
                    Obs::Present => (xi, 0.0),
                    Obs::Absent => (0.0, xi),
                    Obs::Missing => (1.0 - xi, 1.0 - xi),
                };
                s.up[v] = u;
                s.down[v] = d;
            }
            Some([a, c]) => {
                let fa = b.surv[a] * s.up[a] + b.death[a] * s.down[a];
                let fc = b.surv[c] * s.up[c] + b.death[c] * s.down[c];
                s.up[v] = fa * fc;
                s.down[v] = s.down[a] * s.down[c];
            }
        }
    }
    let r = t.root();
    let mut z = s.up[r] / mu;
    s.outside[r] = 1.0;
    for &v in b.post.iter().rev() {
        if let Some([a, c]) = t.children(v) {
            s.outside[a] = s.outside[v] * s.down[c];
            s.outside[c] = s.outside[v] * s.down[a];
        }
        if v != r && s.outside[v] != 0.0 {
            z += s.outside[v] * ((s.up[v] - s.down[v]) * b.death[v] / mu + s.down[v] * b.len[v]);
        }
    }
    z
}

fn scratch(m: usize) -> Scratch {
    Scratch { up: vec![0.0; m], down: vec![0.0; m], outside: vec![0.0; m] }
}

/// z̃_p: expected number of traits displaying `pattern` when λ = 1.
pub fn expected_pattern_count(state: &SdState, pattern: &[Obs]) -> f64 {
    let b = branches(state);
    pattern_expectation(state, &b, pattern, &mut scratch(state.tree.n_nodes()))
}

fn total_from(state: &SdState, b: &Branches) -> f64 {
    let t = &state.tree;
    let mut v = vec![0.0; t.n_nodes()];
    let mut z = 0.0;
    for &i in &b.post {
        v[i] = match t.children(i) {
            None => 1.0 - state.xi[i],
            Some([a, c]) => (b.surv[a] * v[a] + b.death[a]) * (b.surv[c] * v[c] + b.death[c]),
        };
        if t.parent(i).is_some() {
            z += (1.0 - v[i]) * b.death[i] / state.mu;
        }
    }
    z + (1.0 - v[t.root()]) / state.mu
}

/// Z = Σ_q z̃_q over all observable patterns, without enumerating them.
pub fn expected_total(state: &SdState) -> f64 {
    total_from(state, &branches(state))
}

fn ln_factorial(k: u64) -> f64 {
    ln_gamma(k as f64 + 1.0)
}

/// Negative Multinomial log-likelihood of the data with λ integrated out.
/// Returns −∞ when an observed pattern has zero expectation.
pub fn log_likelihood(model: &SdModel, state: &SdState, data: &PatternData) -> f64 {
    let b = branches(state);
    let z_total = total_from(state, &b);
    let GammaPrior { shape: a, rate: rb } = model.lambda_prior;
    let n = data.total();
    let denom = (rb + z_total).ln();
    let mut ll = ln_gamma(a + n as f64) - ln_gamma(a) + a * (rb.ln() - denom);
    let mut s = scratch(state.tree.n_nodes());
    for (p, k) in data.iter() {
        let z = pattern_expectation(state, &b, p, &mut s);
        if !(z > 0.0) {
            return f64::NEG_INFINITY;
        }
        ll += k as f64 * (z.ln() - denom) - ln_factorial(k);
    }
    ll
}

/// Log prior density; −∞ for any state outside the support.
pub fn log_prior(model: &SdModel, state: &SdState) -> f64 {
    let t = &state.tree;
    if !t.times_valid() || t.age(t.root()) > model.root_bound {
        return f64::NEG_INFINITY;
    }
    for (i, &(lo, hi)) in model.leaf_ranges.iter().enumerate() {
        if !(lo <= t.age(i) && t.age(i) <= hi) {
            return f64::NEG_INFINITY;
        }
    }
    if !t.satisfies(&model.constraints) {
        return f64::NEG_INFINITY;
    }
    if (model.mu.vary && !model.mu.contains(state.mu)) || !(state.mu > 0.0) {
        return f64::NEG_INFINITY;
    }
    if (model.kappa.vary && !model.kappa.contains(state.kappa)) || !(0.0..1.0).contains(&state.kappa) {
        return f64::NEG_INFINITY;
    }
    if state.xi.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return f64::NEG_INFINITY;
    }
    if state.cats.get(t.root()) != 0 {
        return f64::NEG_INFINITY;
    }
    if model.catastrophes {
        catastrophe_log_prior(model.rho_prior, t, &state.cats)
    } else if state.cats.total() == 0 {
        0.0
    } else {
        f64::NEG_INFINITY
    }
}

/// Negative Multinomial mass of the per-branch counts with ρ integrated out.
pub fn catastrophe_log_prior(rho: GammaPrior, tree: &Tree, cats: &CatastropheCounts) -> f64 {
    let delta = tree.total_length();
    let denom = (rho.rate + delta).ln();
    let n = cats.total() as f64;
    let mut lp = ln_gamma(rho.shape + n) - ln_gamma(rho.shape) + rho.shape * (rho.rate.ln() - denom);
    for i in 0..tree.n_nodes() {
        let k = cats.get(i);
        if k > 0 {
            lp += k as f64 * (tree.branch_length(i).ln() - denom) - ln_factorial(k as u64);
        }
    }
    lp
}

/// Shape and success probability of the Negative Binomial prior on the count of
/// branch `i` given every other branch.
pub fn conditional_count_law(rho: GammaPrior, tree: &Tree, cats: &CatastropheCounts, i: usize) -> (f64, f64) {
    let others = (cats.total() - cats.get(i)) as f64;
    let w = tree.branch_length(i) / (rho.rate + tree.total_length());
    (rho.shape + others, w)
}

/// Log pmf of a Negative Binomial with `shape` and success probability `w`:
/// Γ(A+k)/(Γ(A) k!) (1-w)^A w^k.
pub fn neg_binomial_log_pmf(shape: f64, w: f64, k: u64) -> f64 {
    if k == 0 {
        return shape * (-w).ln_1p();
    }
    if w <= 0.0 {
        return f64::NEG_INFINITY;
    }
    ln_gamma(shape + k as f64) - ln_gamma(shape) - ln_factorial(k) + shape * (-w).ln_1p() + k as f64 * w.ln()
}

/// Exact forward simulation of trait patterns on a fixed tree.
pub fn simulate<R: Rng + ?Sized>(
    tree: &Tree,
    lambda: f64,
    mu: f64,
    kappa: f64,
    cats: &CatastropheCounts,
    xi: &[f64],
    rng: &mut R,
) -> PatternData {
    let m = tree.n_nodes();
    let mut alive: Vec<Vec<u32>> = vec![vec![]; m];
    let mut next_id: u32 = 0;
    let root_count = poisson(lambda / mu, rng);
    alive[tree.root()] = (0..root_count as u32).collect();
    next_id += root_count as u32;
    let post = tree.postorder();
    for &v in post.iter().rev() {
        let Some(p) = tree.parent(v) else { continue };
        let l = effective_length(tree.branch_length(v), cats.get(v), mu, kappa);
        let keep = (-mu * l).exp();
        let mut here: Vec<u32> = alive[p].iter().copied().filter(|_| rng.random::<f64>() < keep).collect();
        let births = poisson(lambda * l, rng);
        for _ in 0..births {
            // Born at a uniform point of the effective branch, τ above node v.
            let tau = rng.random::<f64>() * l;
            if rng.random::<f64>() < (-mu * tau).exp() {
                here.push(next_id);
            }
            next_id += 1;
        }
        alive[v] = here;
    }
    let n = tree.n_leaves();
    let mut rows: BTreeMap<u32, Vec<Obs>> = BTreeMap::new();
    for leaf in 0..n {
        for &id in &alive[leaf] {
            rows.entry(id).or_insert_with(|| vec![Obs::Absent; n])[leaf] = Obs::Present;
        }
    }
    let registered = rows.into_values().map(|mut row| {
        for (leaf, o) in row.iter_mut().enumerate() {
            if rng.random::<f64>() >= xi[leaf] {
                *o = Obs::Missing;
            }
        }
        row
    });
    let registered: Vec<Vec<Obs>> = registered.collect();
    PatternData::from_patterns(tree.taxa().clone(), registered)
}

fn poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as u64
}

/// Independent Beta(alpha, beta) registration probabilities, one per leaf.
pub fn simulate_missingness<R: Rng + ?Sized>(alpha: f64, beta: f64, n_leaves: usize, rng: &mut R) -> Vec<f64> {
    let d = Beta::new(alpha, beta).expect("positive Beta parameters");
    (0..n_leaves).map(|_| d.sample(rng)).collect()
}
