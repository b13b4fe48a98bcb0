//! Experiment configuration files.
//!
//! A config is TOML with a `[model]` table, an optional `[simulation]` or
//! `[data]` source, `[kernel]`, `[run]` and any number of `[[constraints]]`.
//! Errors carry the line of the offending key where it can be located.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chains::{ExperimentSpec, InitConfig, RunSettings};
use crate::coupling::RandomStream;
use crate::kernel::{applicable, KernelConfig, MoveId, DEFAULT_THETA};
use crate::model::{simulate, simulate_missingness, CatastropheCounts, GammaPrior, PatternData, ScalarSpec, SdModel};
use crate::tree::{parse_newick, random_tree, CladeConstraint, LeafSet, Tree};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("config line {line}: {message}")]
    At { line: usize, message: String },
    #[error("config: {0}")]
    Invalid(String),
}

/// Missingness given as one value for every leaf or one per leaf.
#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(untagged)]
pub enum XiSpec {
    All(f64),
    PerLeaf(Vec<f64>),
}

impl XiSpec {
    pub fn values(&self, n: usize) -> Option<Vec<f64>> {
        match self {
            XiSpec::All(v) => Some(vec![*v; n]),
            XiSpec::PerLeaf(v) if v.len() == n => Some(v.clone()),
            XiSpec::PerLeaf(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub n_leaves: usize,
    pub root_age: f64,
    pub lambda: f64,
    pub mu: f64,
    #[serde(default)]
    pub kappa: f64,
    /// Catastrophes placed on distinct, randomly chosen leaf branches.
    #[serde(default)]
    pub n_catastrophes: usize,
    #[serde(default = "one_xi")]
    pub xi: XiSpec,
    /// Beta(alpha, beta) registration probabilities; overrides `xi`.
    pub xi_beta: Option<[f64; 2]>,
    /// Fixed true tree; a random coalescent shape is drawn otherwise.
    pub tree: Option<String>,
    #[serde(default = "one")]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Tab-separated pattern file, relative to the config file.
    pub patterns: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub root_bound: f64,
    #[serde(default)]
    pub catastrophes: bool,
    /// Gamma(shape, rate) prior on the birth rate.
    #[serde(default = "default_lambda_prior")]
    pub lambda_prior: [f64; 2],
    /// Gamma(shape, rate) prior on the catastrophe rate.
    #[serde(default = "default_rho_prior")]
    pub rho_prior: [f64; 2],
    /// Death rate, fixed unless `mu_bounds` is set; then the starting value.
    pub mu: f64,
    pub mu_bounds: Option<[f64; 2]>,
    #[serde(default)]
    pub kappa: f64,
    pub kappa_bounds: Option<[f64; 2]>,
    #[serde(default = "one_xi")]
    pub xi: XiSpec,
    #[serde(default)]
    pub vary_xi: bool,
    /// Admissible age range for named leaves; others sit at age 0.
    #[serde(default)]
    pub leaf_ranges: BTreeMap<String, [f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    #[serde(default = "default_theta")]
    pub theta: f64,
    /// Move name to weight. Uniform over the usable moves when absent.
    pub weights: Option<BTreeMap<String, f64>>,
}

impl Default for KernelSection {
    fn default() -> Self {
        KernelSection { theta: DEFAULT_THETA, weights: None }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub lags: Vec<u64>,
    pub n_pairs: u32,
    pub max_iter: u64,
    pub thinning: u64,
    pub master_seed: u64,
    pub k_init: Option<u64>,
    pub keep_samples: bool,
    pub after_meeting: u64,
    pub marginal_chains: u32,
    pub marginal_iterations: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            lags: vec![100],
            n_pairs: 10,
            max_iter: 100_000,
            thinning: 100,
            master_seed: 1,
            k_init: None,
            keep_samples: true,
            after_meeting: 0,
            marginal_chains: 4,
            marginal_iterations: 100_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintConfig {
    pub taxa: Vec<String>,
    pub age: Option<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub simulation: Option<SimulationConfig>,
    pub data: Option<DataConfig>,
    pub model: ModelConfig,
    #[serde(default)]
    pub kernel: KernelSection,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub constraints: Vec<ConstraintConfig>,
    #[serde(skip)]
    source: String,
}

fn one() -> u64 {
    1
}
fn one_xi() -> XiSpec {
    XiSpec::All(1.0)
}
fn default_lambda_prior() -> [f64; 2] {
    [0.001, 0.001]
}
fn default_rho_prior() -> [f64; 2] {
    [1.5, 5000.0]
}
fn default_theta() -> f64 {
    DEFAULT_THETA
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// SHA-256 of the config text, in hex.
pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Line of `key` inside table `table` ("" for the top level), 1-based.
fn line_of(text: &str, table: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (k, raw) in text.lines().enumerate() {
        let l = raw.trim();
        if l.starts_with('[') {
            current = l.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if current == table && key.is_empty() {
                return Some(k + 1);
            }
            continue;
        }
        if current == table {
            if let Some((lhs, _)) = l.split_once('=') {
                if lhs.trim().trim_matches('"') == key {
                    return Some(k + 1);
                }
            }
        }
    }
    None
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            let message = e.message().to_string();
            match line {
                Some(line) => ConfigError::At { line, message },
                None => ConfigError::Invalid(message),
            }
        })?;
        cfg.source = text.to_string();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn hash(&self) -> String {
        config_hash(&self.source)
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    fn fail(&self, table: &str, key: &str, message: impl Into<String>) -> ConfigError {
        let message = message.into();
        match line_of(&self.source, table, key) {
            Some(line) => ConfigError::At { line, message },
            None => ConfigError::Invalid(message),
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        if !(m.root_bound > 0.0 && m.root_bound.is_finite()) {
            return Err(self.fail("model", "root_bound", "root_bound must be positive"));
        }
        for (key, g) in [("lambda_prior", m.lambda_prior), ("rho_prior", m.rho_prior)] {
            if !g.iter().all(|v| *v > 0.0 && v.is_finite()) {
                return Err(self.fail("model", key, format!("{key} needs positive shape and rate")));
            }
        }
        if !(m.mu > 0.0 && m.mu.is_finite()) {
            return Err(self.fail("model", "mu", "mu must be positive"));
        }
        if let Some([lo, hi]) = m.mu_bounds {
            if !(0.0 < lo && lo < hi && lo <= m.mu && m.mu <= hi) {
                return Err(self.fail("model", "mu_bounds", "mu_bounds need 0 < lo < hi with mu inside"));
            }
        }
        if !(0.0..1.0).contains(&m.kappa) {
            return Err(self.fail("model", "kappa", "kappa must lie in [0, 1)"));
        }
        if let Some([lo, hi]) = m.kappa_bounds {
            if !(0.0 <= lo && lo < hi && hi < 1.0 && lo <= m.kappa && m.kappa <= hi) {
                return Err(self.fail("model", "kappa_bounds", "kappa_bounds need 0 <= lo < hi < 1 with kappa inside"));
            }
        }
        for (name, [lo, hi]) in &m.leaf_ranges {
            if !(0.0 <= *lo && lo <= hi) {
                return Err(self.fail("model.leaf_ranges", name, format!("leaf range for {name} needs 0 <= lo <= hi")));
            }
        }
        let xi_ok = |x: &XiSpec| match x {
            XiSpec::All(v) => (0.0..=1.0).contains(v),
            XiSpec::PerLeaf(v) => v.iter().all(|x| (0.0..=1.0).contains(x)),
        };
        if !xi_ok(&m.xi) {
            return Err(self.fail("model", "xi", "xi values must lie in [0, 1]"));
        }
        if let Some(s) = &self.simulation {
            if s.n_leaves < 2 {
                return Err(self.fail("simulation", "n_leaves", "n_leaves must be at least 2"));
            }
            if !(s.root_age > 0.0 && s.root_age.is_finite()) {
                return Err(self.fail("simulation", "root_age", "root_age must be positive"));
            }
            if !(s.lambda >= 0.0 && s.lambda.is_finite()) {
                return Err(self.fail("simulation", "lambda", "lambda must be non-negative"));
            }
            if !(s.mu > 0.0 && s.mu.is_finite()) {
                return Err(self.fail("simulation", "mu", "mu must be positive"));
            }
            if !(0.0..1.0).contains(&s.kappa) {
                return Err(self.fail("simulation", "kappa", "kappa must lie in [0, 1)"));
            }
            if s.n_catastrophes > s.n_leaves {
                return Err(self.fail("simulation", "n_catastrophes", "more catastrophes than leaf branches"));
            }
            if s.n_catastrophes > 0 && s.kappa == 0.0 {
                return Err(self.fail("simulation", "kappa", "catastrophes need kappa > 0"));
            }
            if !xi_ok(&s.xi) || s.xi.values(s.n_leaves).is_none() {
                return Err(self.fail("simulation", "xi", "xi needs one value in [0, 1] or one per leaf"));
            }
            if let Some(b) = s.xi_beta {
                if !b.iter().all(|v| *v > 0.0 && v.is_finite()) {
                    return Err(self.fail("simulation", "xi_beta", "xi_beta needs positive parameters"));
                }
            }
            if let Some(t) = &s.tree {
                let tree = parse_newick(t).map_err(|e| self.fail("simulation", "tree", e.to_string()))?;
                if tree.n_leaves() != s.n_leaves {
                    return Err(self.fail("simulation", "tree", "tree leaf count differs from n_leaves"));
                }
            }
        }
        let r = &self.run;
        if r.lags.is_empty() || r.lags[0] == 0 || r.lags.windows(2).any(|w| w[0] >= w[1]) {
            return Err(self.fail("run", "lags", "lags must be positive and strictly increasing"));
        }
        if r.thinning == 0 {
            return Err(self.fail("run", "thinning", "thinning must be positive"));
        }
        if r.max_iter <= *r.lags.last().unwrap() {
            return Err(self.fail("run", "max_iter", "max_iter must exceed the largest lag"));
        }
        if r.n_pairs == 0 {
            return Err(self.fail("run", "n_pairs", "n_pairs must be positive"));
        }
        if !(self.kernel.theta > 0.0 && self.kernel.theta.is_finite()) {
            return Err(self.fail("kernel", "theta", "theta must be positive"));
        }
        if let Some(w) = &self.kernel.weights {
            for (name, v) in w {
                if MoveId::from_name(name).is_none() {
                    return Err(self.fail("kernel.weights", name, format!("unknown move '{name}'")));
                }
                if !(*v >= 0.0 && v.is_finite()) {
                    return Err(self.fail("kernel.weights", name, format!("weight for {name} must be non-negative")));
                }
            }
        }
        for (k, c) in self.constraints.iter().enumerate() {
            if let Some([lo, hi]) = c.age {
                if !(0.0 <= lo && lo <= hi) {
                    return Err(ConfigError::Invalid(format!("constraint {}: age needs 0 <= lo <= hi", k + 1)));
                }
            }
        }
        Ok(())
    }

    /// The model for data over `taxa`.
    pub fn model(&self, taxa: &[String]) -> Result<SdModel, ConfigError> {
        let m = &self.model;
        let n = taxa.len();
        let index = |name: &str| taxa.iter().position(|t| t == name);
        let mut leaf_ranges = vec![(0.0, 0.0); n];
        for (name, [lo, hi]) in &m.leaf_ranges {
            let i = index(name).ok_or_else(|| self.fail("model.leaf_ranges", name, format!("unknown taxon '{name}'")))?;
            leaf_ranges[i] = (*lo, *hi);
        }
        let mut constraints = vec![];
        for (k, c) in self.constraints.iter().enumerate() {
            let mut set = LeafSet::empty(n);
            for name in &c.taxa {
                let i = index(name)
                    .ok_or_else(|| ConfigError::Invalid(format!("constraint {}: unknown taxon '{name}'", k + 1)))?;
                set.insert(i);
            }
            let age = c.age.map(|[lo, hi]| (lo, hi));
            constraints.push(
                CladeConstraint::new(set, n, age)
                    .map_err(|e| ConfigError::Invalid(format!("constraint {}: {e}", k + 1)))?,
            );
        }
        let scalar = |b: Option<[f64; 2]>| match b {
            Some([lo, hi]) => ScalarSpec { lo, hi, vary: true },
            None => ScalarSpec::fixed(),
        };
        let model = SdModel {
            lambda_prior: GammaPrior { shape: m.lambda_prior[0], rate: m.lambda_prior[1] },
            rho_prior: GammaPrior { shape: m.rho_prior[0], rate: m.rho_prior[1] },
            root_bound: m.root_bound,
            mu: scalar(m.mu_bounds),
            kappa: scalar(m.kappa_bounds),
            vary_xi: m.vary_xi,
            catastrophes: m.catastrophes,
            leaf_ranges,
            constraints,
        };
        model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(model)
    }

    pub fn kernel(&self, model: &SdModel, coupled: bool) -> Result<KernelConfig, ConfigError> {
        let Some(w) = &self.kernel.weights else {
            let mut k = KernelConfig::default_for(model, coupled);
            k.theta = self.kernel.theta;
            return Ok(k);
        };
        let mut weights = vec![];
        for (name, &v) in w {
            let m = MoveId::from_name(name).expect("validated");
            if v > 0.0 && !applicable(model, m) {
                return Err(self.fail("kernel.weights", name, format!("move '{name}' cannot be used with this model")));
            }
            weights.push((m, v));
        }
        KernelConfig::new(weights, self.kernel.theta).map_err(|e| self.fail("kernel", "weights", e.to_string()))
    }

    pub fn init(&self, n_leaves: usize) -> Result<InitConfig, ConfigError> {
        let xi = self
            .model
            .xi
            .values(n_leaves)
            .ok_or_else(|| self.fail("model", "xi", format!("xi needs one value or {n_leaves} values")))?;
        let given = !matches!(self.model.xi, XiSpec::All(v) if v == 1.0);
        Ok(InitConfig {
            mu: self.model.mu,
            kappa: self.model.kappa,
            xi: (given || !self.model.vary_xi).then_some(xi),
            k_init: self.run.k_init,
        })
    }

    pub fn experiment_spec(&self) -> ExperimentSpec {
        let r = &self.run;
        ExperimentSpec {
            lags: r.lags.clone(),
            n_pairs: r.n_pairs,
            master_seed: r.master_seed,
            settings: RunSettings {
                max_iter: r.max_iter,
                thinning: r.thinning,
                keep_samples: r.keep_samples,
                after_meeting: r.after_meeting,
            },
        }
    }
}

/// A simulated data set with the truth that generated it.
#[derive(Clone, Debug)]
pub struct Simulated {
    pub tree: Tree,
    pub cats: CatastropheCounts,
    /// Leaves whose incoming branch carries a catastrophe.
    pub catastrophe_leaves: Vec<String>,
    pub xi: Vec<f64>,
    pub data: PatternData,
}

/// Stream reserved for data simulation, apart from any chain stream.
const SIMULATION_STREAM: u64 = u64::MAX;

impl SimulationConfig {
    /// Draws the true tree, catastrophe placement, missingness and data.
    pub fn run(&self) -> Result<Simulated, ConfigError> {
        let mut rng = RandomStream::new(self.seed, SIMULATION_STREAM);
        let taxa: Arc<Vec<String>> = Arc::new((1..=self.n_leaves).map(|i| format!("t{i}")).collect());
        let tree = match &self.tree {
            Some(t) => {
                let t = parse_newick(t).map_err(|e| ConfigError::Invalid(e.to_string()))?;
                let mut names = t.taxa().to_vec();
                names.sort();
                t.with_taxa_order(&names).map_err(|e| ConfigError::Invalid(e.to_string()))?
            }
            None => random_tree(taxa, self.root_age, &[], &mut rng).map_err(|e| ConfigError::Invalid(e.to_string()))?,
        };
        let mut cats = CatastropheCounts::zeros(tree.n_nodes());
        let mut leaves: Vec<usize> = sample(&mut rng, self.n_leaves, self.n_catastrophes).into_vec();
        leaves.sort_unstable();
        for &leaf in &leaves {
            cats.set(leaf, 1);
        }
        let xi = match self.xi_beta {
            Some([a, b]) => simulate_missingness(a, b, self.n_leaves, &mut rng),
            None => self.xi.values(self.n_leaves).expect("validated"),
        };
        let data = simulate(&tree, self.lambda, self.mu, self.kappa, &cats, &xi, &mut rng);
        if data.is_empty() {
            return Err(ConfigError::Invalid("simulated data is empty; raise lambda or the root age".into()));
        }
        let catastrophe_leaves = leaves.iter().map(|&l| tree.taxa()[l].clone()).collect();
        Ok(Simulated { tree, cats, catastrophe_leaves, xi, data })
    }
}
