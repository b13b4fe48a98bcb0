//! Lag-l coupled chains and the experiment runner.
//!
//! The X chain runs `lag` marginal steps first; afterwards X and Y move
//! together through the coupled kernel until they meet. Meeting is only
//! checked at thinned checkpoints, so recorded meeting times are `lag` plus a
//! multiple of the thinning stride.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::coupling::RandomStream;
use crate::kernel::{step_coupled, step_marginal, Chain, KernelConfig, KernelError, Posterior};
use crate::model::SdState;
use crate::tree::{housekeeping, random_tree, TreeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChainError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("initialisation: {0}")]
    Init(String),
    #[error("coupled chains separated after meeting at iteration {0}")]
    Separated(u64),
}

/// Starting values and the length of the prior-only warm-up.
#[derive(Clone, Debug, PartialEq)]
pub struct InitConfig {
    pub mu: f64,
    pub kappa: f64,
    /// Fixed missingness per leaf; `None` means 1 when ξ is fixed and a
    /// uniform draw per leaf when it varies.
    pub xi: Option<Vec<f64>>,
    /// Prior-only warm-up iterations; `None` means 10·|L|².
    pub k_init: Option<u64>,
}

impl InitConfig {
    pub fn new(mu: f64, kappa: f64) -> Self {
        InitConfig { mu, kappa, xi: None, k_init: None }
    }
}

/// Draws a starting state: a random topology with a random root age, then
/// `k_init` prior-only iterations without catastrophes.
pub fn init_state<R: Rng + ?Sized>(post: &Posterior, init: &InitConfig, rng: &mut R) -> Result<SdState, ChainError> {
    let model = &post.model;
    let n = model.leaf_ranges.len();
    let taxa = match &post.data {
        Some(d) => d.taxa().clone(),
        None => std::sync::Arc::new((0..n).map(|i| format!("t{i}")).collect()),
    };
    let mut prior_model = model.clone();
    prior_model.catastrophes = false;
    let prior = Posterior::prior_only(prior_model);
    let oldest_leaf = model.leaf_ranges.iter().map(|r| r.0).fold(0.0, f64::max);
    for _ in 0..1000 {
        let root = oldest_leaf + (model.root_bound - oldest_leaf) * (1.0 - rng.random::<f64>());
        let base = random_tree(taxa.clone(), root, &model.constraints, rng)?;
        let mut tree = base.clone();
        for v in base.internal_nodes() {
            tree.set_age(v, oldest_leaf + base.age(v) * (root - oldest_leaf) / root);
        }
        for (i, r) in model.leaf_ranges.iter().enumerate() {
            tree.set_age(i, r.0);
        }
        let mut state = SdState::new(tree, init.mu, init.kappa);
        state.xi = match &init.xi {
            Some(xi) => xi.clone(),
            None if model.vary_xi => (0..n).map(|_| rng.random::<f64>()).collect(),
            None => vec![1.0; n],
        };
        let mut chain = Chain::new(state, &prior);
        if chain.log_post == f64::NEG_INFINITY {
            continue;
        }
        let kernel = KernelConfig::init_kernel(&prior.model);
        let steps = init.k_init.unwrap_or(10 * (n * n) as u64);
        for _ in 0..steps {
            step_marginal(&mut chain, &prior, &kernel, rng)?;
        }
        if post.log_density(&chain.state) > f64::NEG_INFINITY {
            return Ok(chain.state);
        }
    }
    Err(ChainError::Init("no starting tree with finite posterior in 1000 attempts".into()))
}

/// Runs `steps` marginal iterations.
pub fn advance_marginal<R: Rng + ?Sized>(
    chain: &mut Chain,
    post: &Posterior,
    kernel: &KernelConfig,
    rng: &mut R,
    steps: u64,
) -> Result<u64, ChainError> {
    let mut accepted = 0;
    for _ in 0..steps {
        accepted += u64::from(step_marginal(chain, post, kernel, rng)?);
    }
    Ok(accepted)
}

/// One thinned sample row.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRow {
    pub iteration: u64,
    pub log_posterior: f64,
    pub root_age: f64,
    pub mu: f64,
    pub kappa: f64,
    pub n_total: u32,
    pub newick: String,
    pub xi: Vec<f64>,
}

impl SampleRow {
    pub fn of(iteration: u64, c: &Chain) -> Self {
        let t = &c.state.tree;
        SampleRow {
            iteration,
            log_posterior: c.log_post,
            root_age: t.age(t.root()),
            mu: c.state.mu,
            kappa: c.state.kappa,
            n_total: c.state.cats.total(),
            newick: t.to_newick(),
            xi: c.state.xi.clone(),
        }
    }
}

/// X at iteration `s` and Y at iteration `s - lag`.
#[derive(Clone, Debug)]
pub struct CoupledPair {
    pub x: Chain,
    pub y: Chain,
    pub lag: u64,
    pub s: u64,
    pub met: bool,
    pub stride: u64,
    pub rng: RandomStream,
}

impl CoupledPair {
    /// True at iterations where meeting is checked and samples are kept.
    pub fn at_checkpoint(&self) -> bool {
        (self.s - self.lag) % self.stride == 0
    }

    /// Compares the chains if this is a checkpoint, flagging a meeting and
    /// failing loudly if a met pair has come apart.
    pub fn check(&mut self) -> Result<bool, ChainError> {
        if !self.at_checkpoint() {
            return Ok(self.met);
        }
        let same = self.x.state.same_state(&self.y.state);
        if self.met && !same {
            return Err(ChainError::Separated(self.s));
        }
        self.met |= same;
        Ok(self.met)
    }
}

/// Housekeeping followed by one coupled iteration.
pub fn advance_coupled(pair: &mut CoupledPair, post: &Posterior, kernel: &KernelConfig) -> Result<(), ChainError> {
    let (ty, perm) = housekeeping(&pair.x.state.tree, &pair.y.state.tree)?;
    pair.y.state.tree = ty;
    pair.y.state.cats = pair.y.state.cats.permute(&perm);
    if pair.y.state.identical(&pair.x.state) {
        // Same state, possibly reached under different labels: share the cached
        // value so rounding in label-ordered sums cannot split the decisions.
        pair.y.log_post = pair.x.log_post;
    }
    step_coupled(&mut pair.x, &mut pair.y, post, kernel, &mut pair.rng)?;
    pair.s += 1;
    pair.check()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSettings {
    pub max_iter: u64,
    pub thinning: u64,
    /// Keep thinned samples of both chains.
    pub keep_samples: bool,
    /// Coupled iterations to run after meeting, checking that the chains stay together.
    pub after_meeting: u64,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings { max_iter: 100_000, thinning: 100, keep_samples: false, after_meeting: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeetingRecord {
    pub pair: u32,
    pub lag: u64,
    /// Meeting time, or `max_iter` when censored.
    pub tau: u64,
    pub censored: bool,
    pub wall_seconds: f64,
    /// Set when the pair aborted; such a record is also censored.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairOutput {
    pub record: MeetingRecord,
    pub x_samples: Vec<SampleRow>,
    pub y_samples: Vec<SampleRow>,
}

/// Samples one meeting time.
pub fn run_pair(
    post: &Posterior,
    kernel: &KernelConfig,
    init: &InitConfig,
    settings: &RunSettings,
    lag: u64,
    pair: u32,
    mut rng: RandomStream,
) -> PairOutput {
    let start = Instant::now();
    let mut xs = vec![];
    let mut ys = vec![];
    let mut reached = 0;
    let result = (|| -> Result<Option<u64>, ChainError> {
        if lag == 0 {
            return Err(ChainError::Init("lag must be at least 1".into()));
        }
        let stride = settings.thinning.max(1);
        let mut x = Chain::new(init_state(post, init, &mut rng)?, post);
        if settings.keep_samples {
            xs.push(SampleRow::of(0, &x));
        }
        for s in 1..=lag {
            step_marginal(&mut x, post, kernel, &mut rng)?;
            if settings.keep_samples && s % stride == 0 {
                xs.push(SampleRow::of(s, &x));
            }
        }
        let y = Chain::new(init_state(post, init, &mut rng)?, post);
        if settings.keep_samples {
            ys.push(SampleRow::of(0, &y));
        }
        let mut p = CoupledPair { x, y, lag, s: lag, met: false, stride, rng };
        reached = lag;
        p.check()?;
        while !p.met && p.s < settings.max_iter {
            advance_coupled(&mut p, post, kernel)?;
            reached = p.s;
            if settings.keep_samples {
                if p.s % stride == 0 {
                    xs.push(SampleRow::of(p.s, &p.x));
                }
                if (p.s - lag) % stride == 0 {
                    ys.push(SampleRow::of(p.s - lag, &p.y));
                }
            }
        }
        if !p.met {
            return Ok(None);
        }
        let tau = p.s;
        for _ in 0..settings.after_meeting {
            advance_coupled(&mut p, post, kernel)?;
        }
        Ok(Some(tau))
    })();
    let (tau, censored, error) = match result {
        Ok(Some(tau)) => (tau, false, None),
        Ok(None) => (settings.max_iter, true, None),
        Err(e) => (reached.max(lag), true, Some(e.to_string())),
    };
    let record = MeetingRecord { pair, lag, tau, censored, wall_seconds: start.elapsed().as_secs_f64(), error };
    PairOutput { record, x_samples: xs, y_samples: ys }
}

/// What to run: `n_pairs` independent pairs at each lag.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub lags: Vec<u64>,
    pub n_pairs: u32,
    pub master_seed: u64,
    pub settings: RunSettings,
}

/// Runs every (lag, pair) on the current rayon pool. Pair `k` at the `m`-th lag
/// always draws from the same stream, so results do not depend on scheduling.
/// `skip` lets a resumed run leave out pairs that already finished, and
/// `on_done` sees each pair as soon as it completes.
pub fn run_experiment(
    post: &Posterior,
    kernel: &KernelConfig,
    init: &InitConfig,
    spec: &ExperimentSpec,
    skip: &(dyn Fn(u64, u32) -> bool + Sync),
    on_done: &(dyn Fn(&PairOutput) + Sync),
) -> Vec<PairOutput> {
    let jobs: Vec<(u32, u64, u32)> = spec
        .lags
        .iter()
        .enumerate()
        .flat_map(|(m, &lag)| (0..spec.n_pairs).map(move |k| (m as u32, lag, k)))
        .filter(|&(_, lag, k)| !skip(lag, k))
        .collect();
    jobs.into_par_iter()
        .map(|(m, lag, k)| {
            let rng = RandomStream::for_pair(spec.master_seed, m, k);
            let out = run_pair(post, kernel, init, &spec.settings, lag, k, rng);
            on_done(&out);
            out
        })
        .collect()
}

/// Stream index used by plain marginal runs, kept clear of pair streams.
const MARGINAL_STREAM: u32 = u32::MAX;

/// Independent marginal chains of `iterations` steps, thinned by `thinning`.
pub fn run_marginal(
    post: &Posterior,
    kernel: &KernelConfig,
    init: &InitConfig,
    n_chains: u32,
    iterations: u64,
    thinning: u64,
    master_seed: u64,
) -> Vec<Result<Vec<SampleRow>, ChainError>> {
    (0..n_chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = RandomStream::for_pair(master_seed, MARGINAL_STREAM, c);
            let mut chain = Chain::new(init_state(post, init, &mut rng)?, post);
            let stride = thinning.max(1);
            let mut rows = vec![SampleRow::of(0, &chain)];
            for s in 1..=iterations {
                step_marginal(&mut chain, post, kernel, &mut rng)?;
                if s % stride == 0 {
                    rows.push(SampleRow::of(s, &chain));
                }
            }
            Ok(rows)
        })
        .collect()
}
