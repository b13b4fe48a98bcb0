//! The mixture of Metropolis-Hastings moves.
//!
//! Every move is written once over two optional lanes. With a single lane it is
//! the marginal move; with both lanes each random choice goes through a maximal
//! coupler, so two identical states always receive identical proposals and a
//! lane that fails part way carries on marginally.
//!
//! `ProposalOutcome::log_hastings` holds only the proposal ratio
//! ln[Q(x', x) / Q(x, x')]; the posterior ratio is added in [`mh_accept`].

use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::coupling::{
    couple_categorical, couple_counts, couple_discrete_uniform, couple_generic, couple_multinomial,
    couple_trunc_exponential, couple_uniform_interval, multinomial_log_pmf, sample_interval, sample_multinomial,
    sample_shifted_exp, sample_weighted, shared_scale, shared_uniform, shifted_exp_log_density, CoupledDraw,
    CountLaw, CouplingError, DEFAULT_REJECTION_CAP,
};
use crate::model::{conditional_count_law, log_likelihood, log_prior, PatternData, SdModel, SdState};
use crate::tree::Tree;

/// Moves numbered as in the usual Stochastic Dollo sampler; 14 and 16 only
/// exist with lateral transfer and are not implemented.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MoveId {
    NarrowSwap,
    WideSwap,
    NarrowSpr,
    WideSpr,
    NodeTime,
    LeafTime,
    RescaleTree,
    RescaleSubtree,
    RescaleAboveClades,
    AddCatastrophe,
    DeleteCatastrophe,
    MoveCatastrophe,
    ResampleCatastrophes,
    RescaleMu,
    RescaleKappa,
    RescaleXi,
    RescaleAllXi,
}

impl MoveId {
    pub const ALL: [MoveId; 17] = [
        MoveId::NarrowSwap,
        MoveId::WideSwap,
        MoveId::NarrowSpr,
        MoveId::WideSpr,
        MoveId::NodeTime,
        MoveId::LeafTime,
        MoveId::RescaleTree,
        MoveId::RescaleSubtree,
        MoveId::RescaleAboveClades,
        MoveId::AddCatastrophe,
        MoveId::DeleteCatastrophe,
        MoveId::MoveCatastrophe,
        MoveId::ResampleCatastrophes,
        MoveId::RescaleMu,
        MoveId::RescaleKappa,
        MoveId::RescaleXi,
        MoveId::RescaleAllXi,
    ];

    pub fn number(self) -> u8 {
        match self {
            MoveId::NarrowSwap => 1,
            MoveId::WideSwap => 2,
            MoveId::NarrowSpr => 3,
            MoveId::WideSpr => 4,
            MoveId::NodeTime => 5,
            MoveId::LeafTime => 6,
            MoveId::RescaleTree => 7,
            MoveId::RescaleSubtree => 8,
            MoveId::RescaleAboveClades => 9,
            MoveId::AddCatastrophe => 10,
            MoveId::DeleteCatastrophe => 11,
            MoveId::MoveCatastrophe => 12,
            MoveId::ResampleCatastrophes => 13,
            MoveId::RescaleMu => 15,
            MoveId::RescaleKappa => 17,
            MoveId::RescaleXi => 18,
            MoveId::RescaleAllXi => 19,
        }
    }

    /// Config-file key.
    pub fn name(self) -> &'static str {
        match self {
            MoveId::NarrowSwap => "narrow_swap",
            MoveId::WideSwap => "wide_swap",
            MoveId::NarrowSpr => "narrow_spr",
            MoveId::WideSpr => "wide_spr",
            MoveId::NodeTime => "node_time",
            MoveId::LeafTime => "leaf_time",
            MoveId::RescaleTree => "rescale_tree",
            MoveId::RescaleSubtree => "rescale_subtree",
            MoveId::RescaleAboveClades => "rescale_above_clades",
            MoveId::AddCatastrophe => "add_catastrophe",
            MoveId::DeleteCatastrophe => "delete_catastrophe",
            MoveId::MoveCatastrophe => "move_catastrophe",
            MoveId::ResampleCatastrophes => "resample_catastrophes",
            MoveId::RescaleMu => "rescale_mu",
            MoveId::RescaleKappa => "rescale_kappa",
            MoveId::RescaleXi => "rescale_xi",
            MoveId::RescaleAllXi => "rescale_all_xi",
        }
    }

    pub fn from_name(name: &str) -> Option<MoveId> {
        MoveId::ALL.into_iter().find(|m| m.name() == name)
    }

    /// Moves that scale several coordinates by one factor and so cannot
    /// propose a meeting between different states.
    pub fn is_multi_scale(self) -> bool {
        matches!(self, MoveId::RescaleTree | MoveId::RescaleSubtree | MoveId::RescaleAboveClades | MoveId::RescaleAllXi)
    }
}

impl fmt::Display for MoveId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("kernel config: {0}")]
    Config(String),
    #[error(transparent)]
    Coupling(#[from] CouplingError),
    #[error("current state has non-finite log posterior {0}")]
    NonFinite(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelConfig {
    weights: Vec<(MoveId, f64)>,
    /// Rate of the exponential overshoot when an SPR regrafts above the root.
    pub theta: f64,
    /// Added to the Jacobian exponent of moves 7-9. Only the mutation test sets it.
    pub scale_exponent_offset: f64,
}

impl KernelConfig {
    /// Weights are normalised; zero-weight moves are dropped.
    pub fn new(weights: impl IntoIterator<Item = (MoveId, f64)>, theta: f64) -> Result<Self, KernelError> {
        let mut ws: Vec<(MoveId, f64)> = vec![];
        for (m, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(KernelError::Config(format!("weight for {m} must be finite and non-negative")));
            }
            if ws.iter().any(|(n, _)| *n == m) {
                return Err(KernelError::Config(format!("duplicate weight for {m}")));
            }
            if w > 0.0 {
                ws.push((m, w));
            }
        }
        let total: f64 = ws.iter().map(|(_, w)| w).sum();
        if ws.is_empty() {
            return Err(KernelError::Config("at least one move needs positive weight".into()));
        }
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(KernelError::Config("theta must be positive".into()));
        }
        ws.sort_by_key(|(m, _)| *m);
        for (_, w) in &mut ws {
            *w /= total;
        }
        Ok(KernelConfig { weights: ws, theta, scale_exponent_offset: 0.0 })
    }

    pub fn uniform(moves: &[MoveId], theta: f64) -> Result<Self, KernelError> {
        Self::new(moves.iter().map(|&m| (m, 1.0)), theta)
    }

    /// Uniform weights over every move the model can use. Coupled runs leave
    /// out the multi-coordinate scaling moves.
    pub fn default_for(model: &SdModel, coupled: bool) -> Self {
        let moves: Vec<MoveId> = MoveId::ALL
            .into_iter()
            .filter(|&m| applicable(model, m) && !(coupled && m.is_multi_scale()))
            .collect();
        Self::uniform(&moves, DEFAULT_THETA).expect("topology moves are always applicable")
    }

    /// Kernel for the prior-only initialisation runs: tree moves only, with the
    /// scaling moves switched on.
    pub fn init_kernel(model: &SdModel) -> Self {
        let moves: Vec<MoveId> = MoveId::ALL
            .into_iter()
            .filter(|&m| m.number() <= 9 && applicable(model, m))
            .collect();
        Self::uniform(&moves, DEFAULT_THETA).expect("topology moves are always applicable")
    }

    pub fn weights(&self) -> &[(MoveId, f64)] {
        &self.weights
    }

    pub fn weight(&self, m: MoveId) -> f64 {
        self.weights.iter().find(|(n, _)| *n == m).map_or(0.0, |(_, w)| *w)
    }
}

pub const DEFAULT_THETA: f64 = 0.01;

/// Whether a move can ever succeed under `model`.
pub fn applicable(model: &SdModel, m: MoveId) -> bool {
    match m {
        MoveId::NarrowSwap | MoveId::NarrowSpr => model.leaf_ranges.len() >= 3,
        MoveId::LeafTime => model.leaf_ranges.iter().any(|(lo, hi)| lo < hi),
        MoveId::RescaleAboveClades => model.constraints.iter().any(|c| c.age.is_some()),
        MoveId::AddCatastrophe | MoveId::DeleteCatastrophe | MoveId::MoveCatastrophe | MoveId::ResampleCatastrophes => {
            model.catastrophes
        }
        MoveId::RescaleMu => model.mu.vary,
        MoveId::RescaleKappa => model.kappa.vary,
        MoveId::RescaleXi | MoveId::RescaleAllXi => model.vary_xi,
        _ => true,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProposalOutcome {
    pub state: SdState,
    pub log_hastings: f64,
    /// The proposed state equals the current one and the step must reject.
    pub failed: bool,
}

impl ProposalOutcome {
    fn failed(current: &SdState) -> Self {
        ProposalOutcome { state: current.clone(), log_hastings: 0.0, failed: true }
    }
}

/// Model plus optional data. Without data the chain targets the prior.
#[derive(Clone, Debug)]
pub struct Posterior {
    pub model: SdModel,
    pub data: Option<PatternData>,
}

impl Posterior {
    pub fn new(model: SdModel, data: PatternData) -> Self {
        Posterior { model, data: Some(data) }
    }

    pub fn prior_only(model: SdModel) -> Self {
        Posterior { model, data: None }
    }

    pub fn log_density(&self, s: &SdState) -> f64 {
        let lp = log_prior(&self.model, s);
        match &self.data {
            Some(d) if lp > f64::NEG_INFINITY => lp + log_likelihood(&self.model, s, d),
            _ => lp,
        }
    }
}

/// A state with its cached log posterior.
#[derive(Clone, Debug, PartialEq)]
pub struct Chain {
    pub state: SdState,
    pub log_post: f64,
}

impl Chain {
    pub fn new(state: SdState, post: &Posterior) -> Self {
        let log_post = post.log_density(&state);
        Chain { state, log_post }
    }
}

pub fn pick_move<R: Rng + ?Sized>(cfg: &KernelConfig, rng: &mut R) -> MoveId {
    let ws: Vec<f64> = cfg.weights.iter().map(|(_, w)| *w).collect();
    cfg.weights[sample_weighted(&ws, rng)].0
}

/// Marginal proposal for one chain.
pub fn propose<R: Rng + ?Sized>(
    mv: MoveId,
    model: &SdModel,
    cfg: &KernelConfig,
    x: &SdState,
    rng: &mut R,
) -> Result<ProposalOutcome, KernelError> {
    let [ox, _] = run_move(mv, model, cfg, [Some(x), None], rng)?;
    Ok(ox.expect("live lane yields an outcome"))
}

/// Coupled proposal for two housekept states.
pub fn propose_coupled<R: Rng + ?Sized>(
    mv: MoveId,
    model: &SdModel,
    cfg: &KernelConfig,
    x: &SdState,
    y: &SdState,
    rng: &mut R,
) -> Result<(ProposalOutcome, ProposalOutcome), KernelError> {
    let [ox, oy] = run_move(mv, model, cfg, [Some(x), Some(y)], rng)?;
    Ok((ox.expect("live lane"), oy.expect("live lane")))
}

/// MH decision for one chain given ln U.
pub fn mh_accept(current_log_post: f64, outcome: &ProposalOutcome, proposed_log_post: f64, log_u: f64) -> bool {
    !outcome.failed
        && proposed_log_post > f64::NEG_INFINITY
        && log_u <= outcome.log_hastings + proposed_log_post - current_log_post
}

fn evaluate(post: &Posterior, o: &ProposalOutcome) -> f64 {
    if o.failed { f64::NEG_INFINITY } else { post.log_density(&o.state) }
}

/// Accept/reject both chains with one shared uniform.
pub fn mh_step(
    x: &mut Chain,
    ox: ProposalOutcome,
    y: &mut Chain,
    oy: ProposalOutcome,
    u: f64,
    post: &Posterior,
) -> Result<[bool; 2], KernelError> {
    for c in [&*x, &*y] {
        if !c.log_post.is_finite() {
            return Err(KernelError::NonFinite(c.log_post));
        }
    }
    let lx = evaluate(post, &ox);
    let ly = if !oy.failed && !ox.failed && oy.state.identical(&ox.state) { lx } else { evaluate(post, &oy) };
    let log_u = u.ln();
    let ax = mh_accept(x.log_post, &ox, lx, log_u);
    let ay = mh_accept(y.log_post, &oy, ly, log_u);
    if ax {
        *x = Chain { state: ox.state, log_post: lx };
    }
    if ay {
        *y = Chain { state: oy.state, log_post: ly };
    }
    Ok([ax, ay])
}

/// One marginal MH iteration; returns whether the proposal was accepted.
pub fn step_marginal<R: Rng + ?Sized>(
    chain: &mut Chain,
    post: &Posterior,
    cfg: &KernelConfig,
    rng: &mut R,
) -> Result<bool, KernelError> {
    if !chain.log_post.is_finite() {
        return Err(KernelError::NonFinite(chain.log_post));
    }
    let mv = pick_move(cfg, rng);
    let o = propose(mv, &post.model, cfg, &chain.state, rng)?;
    let lp = evaluate(post, &o);
    let accept = mh_accept(chain.log_post, &o, lp, shared_uniform(rng).ln());
    if accept {
        *chain = Chain { state: o.state, log_post: lp };
    }
    Ok(accept)
}

/// One coupled MH iteration on two housekept chains.
pub fn step_coupled<R: Rng + ?Sized>(
    x: &mut Chain,
    y: &mut Chain,
    post: &Posterior,
    cfg: &KernelConfig,
    rng: &mut R,
) -> Result<[bool; 2], KernelError> {
    let mv = pick_move(cfg, rng);
    let (ox, oy) = propose_coupled(mv, &post.model, cfg, &x.state, &y.state, rng)?;
    let u = shared_uniform(rng);
    mh_step(x, ox, y, oy, u, post)
}

type Lanes<T> = [Option<T>; 2];

/// Per-lane bookkeeping while a move is being built.
struct Work<'a> {
    cur: Lanes<&'a SdState>,
    out: Lanes<ProposalOutcome>,
}

impl<'a> Work<'a> {
    fn alive(&self) -> Vec<usize> {
        (0..2).filter(|&k| self.cur[k].is_some() && self.out[k].is_none()).collect()
    }

    fn state(&self, k: usize) -> &'a SdState {
        self.cur[k].expect("lane is present")
    }

    fn fail(&mut self, k: usize) {
        self.out[k] = Some(ProposalOutcome::failed(self.state(k)));
    }

    fn fail_all(&mut self) {
        for k in self.alive() {
            self.fail(k);
        }
    }

    /// Records a proposal, failing it if it breaks time order or a clade constraint.
    fn done(&mut self, k: usize, model: &SdModel, state: SdState, log_hastings: f64) {
        if !state.tree.times_valid() || !state.tree.satisfies(&model.constraints) || !log_hastings.is_finite() {
            self.fail(k);
        } else {
            self.out[k] = Some(ProposalOutcome { state, log_hastings, failed: false });
        }
    }

    fn map<T>(&self, mut f: impl FnMut(usize, &'a SdState) -> T) -> Lanes<T> {
        let mut out = [None, None];
        for k in self.alive() {
            out[k] = Some(f(k, self.state(k)));
        }
        out
    }

    /// Fails lanes whose value does not pass `ok` and drops them from `vals`.
    fn keep<T>(&mut self, vals: &mut Lanes<T>, ok: impl Fn(&T) -> bool) {
        for k in self.alive() {
            if !vals[k].as_ref().is_some_and(&ok) {
                vals[k] = None;
                self.fail(k);
            }
        }
    }
}

/// Draws one value per present lane: a coupled draw when both are present.
fn draw<A, T, R: Rng + ?Sized>(
    args: &Lanes<A>,
    rng: &mut R,
    single: impl Fn(&A, &mut R) -> T,
    pair: impl Fn(&A, &A, &mut R) -> Result<CoupledDraw<T>, CouplingError>,
) -> Result<Lanes<T>, CouplingError> {
    Ok(match args {
        [Some(a), Some(b)] => {
            let d = pair(a, b, rng)?;
            [Some(d.x), Some(d.y)]
        }
        [Some(a), None] => [Some(single(a, rng)), None],
        [None, Some(b)] => [None, Some(single(b, rng))],
        [None, None] => [None, None],
    })
}

fn choose_uniform<T: Ord + Clone, R: Rng + ?Sized>(w: &mut Work, mut sets: Lanes<Vec<T>>, rng: &mut R) -> Lanes<T> {
    w.keep(&mut sets, |s| !s.is_empty());
    draw(&sets, rng, |s, r| s[r.random_range(0..s.len())].clone(), |a, b, r| Ok(couple_discrete_uniform(a, b, r)))
        .expect("finite couplers never hit the cap")
}

fn choose_weighted<T: Ord + Clone, R: Rng + ?Sized>(
    w: &mut Work,
    mut weights: Lanes<Vec<(T, f64)>>,
    rng: &mut R,
) -> Lanes<T> {
    for v in weights.iter_mut().flatten() {
        v.retain(|(_, x)| *x > 0.0);
    }
    w.keep(&mut weights, |v| !v.is_empty());
    draw(
        &weights,
        rng,
        |v, r| {
            let ws: Vec<f64> = v.iter().map(|(_, x)| *x).collect();
            v[sample_weighted(&ws, r)].0.clone()
        },
        |a, b, r| Ok(couple_categorical(a, b, r)),
    )
    .expect("finite couplers never hit the cap")
}

fn draw_interval<R: Rng + ?Sized>(iv: &Lanes<(f64, f64)>, rng: &mut R) -> Lanes<f64> {
    draw(iv, rng, |&i, r| sample_interval(i, r), |&a, &b, r| Ok(couple_uniform_interval(a, b, r)))
        .expect("interval coupler never hits the cap")
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum TimeLaw {
    Interval(f64, f64),
    /// Exp(θ) shifted to start at `lo`.
    Exp { theta: f64, lo: f64 },
}

impl TimeLaw {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            TimeLaw::Interval(a, b) => sample_interval((a, b), rng),
            TimeLaw::Exp { theta, lo } => sample_shifted_exp(theta, lo, rng),
        }
    }

    fn log_density(&self, t: f64) -> f64 {
        match *self {
            TimeLaw::Interval(a, b) => {
                if a <= t && t < b {
                    -(b - a).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            TimeLaw::Exp { theta, lo } => shifted_exp_log_density(theta, lo, t),
        }
    }
}

fn draw_time<R: Rng + ?Sized>(laws: &Lanes<TimeLaw>, rng: &mut R) -> Result<Lanes<f64>, CouplingError> {
    draw(laws, rng, |l, r| l.sample(r), |a, b, r| match (*a, *b) {
        (TimeLaw::Interval(a0, a1), TimeLaw::Interval(b0, b1)) => Ok(couple_uniform_interval((a0, a1), (b0, b1), r)),
        (TimeLaw::Exp { theta, lo: la }, TimeLaw::Exp { lo: lb, .. }) => Ok(couple_trunc_exponential(theta, la, lb, r)),
        _ => couple_generic(
            |r: &mut R| a.sample(r),
            |t| a.log_density(*t),
            |r: &mut R| b.sample(r),
            |t| b.log_density(*t),
            r,
            DEFAULT_REJECTION_CAP,
        ),
    })
}

fn draw_counts<R: Rng + ?Sized>(laws: &Lanes<CountLaw>, rng: &mut R) -> Result<Lanes<u64>, CouplingError> {
    draw(laws, rng, |l, r| l.sample(r), |a, b, r| couple_counts(*a, *b, r))
}

fn run_move<R: Rng + ?Sized>(
    mv: MoveId,
    model: &SdModel,
    cfg: &KernelConfig,
    st: Lanes<&SdState>,
    rng: &mut R,
) -> Result<Lanes<ProposalOutcome>, KernelError> {
    let mut w = Work { cur: st, out: [None, None] };
    if !applicable(model, mv) {
        w.fail_all();
        return Ok(w.out);
    }
    match mv {
        MoveId::NarrowSwap => narrow_swap(&mut w, model, rng),
        MoveId::WideSwap => wide_swap(&mut w, model, rng),
        MoveId::NarrowSpr => spr(&mut w, model, cfg, false, rng)?,
        MoveId::WideSpr => spr(&mut w, model, cfg, true, rng)?,
        MoveId::NodeTime => node_time(&mut w, model, rng)?,
        MoveId::LeafTime => leaf_time(&mut w, model, rng),
        MoveId::RescaleTree => rescale_times(&mut w, model, cfg, Rescale::Tree, rng),
        MoveId::RescaleSubtree => rescale_times(&mut w, model, cfg, Rescale::Subtree, rng),
        MoveId::RescaleAboveClades => rescale_times(&mut w, model, cfg, Rescale::AboveClades, rng),
        MoveId::AddCatastrophe => cat_add(&mut w, model, rng),
        MoveId::DeleteCatastrophe => cat_delete(&mut w, model, rng),
        MoveId::MoveCatastrophe => cat_move(&mut w, model, rng),
        MoveId::ResampleCatastrophes => cat_resample(&mut w, model, rng)?,
        MoveId::RescaleMu => rescale_scalar(&mut w, model, Scalar::Mu, rng),
        MoveId::RescaleKappa => rescale_scalar(&mut w, model, Scalar::Kappa, rng),
        MoveId::RescaleXi => rescale_xi(&mut w, model, rng),
        MoveId::RescaleAllXi => rescale_all_xi(&mut w, model, rng),
    }
    debug_assert!((0..2).all(|k| w.cur[k].is_some() == w.out[k].is_some()));
    Ok(w.out)
}

fn non_root(t: &Tree) -> Vec<usize> {
    (0..t.n_nodes()).filter(|&i| i != t.root()).collect()
}

/// Nodes whose parent is not the root; the narrow swap picks among these.
pub fn narrow_swap_candidates(t: &Tree) -> Vec<usize> {
    let r = t.root();
    (0..t.n_nodes()).filter(|&i| i != r && t.parent(i) != Some(r)).collect()
}

fn narrow_swap<R: Rng + ?Sized>(w: &mut Work, model: &SdModel, rng: &mut R) {
    let sets = w.map(|_, s| narrow_swap_candidates(&s.tree));
    let pick = choose_uniform(w, sets, rng);
    for k in w.alive() {
        let s = w.state(k);
        let i = pick[k].expect("live lane");
        let t = &s.tree;
        let p = t.parent(i).expect("non-root");
        let j = t.sibling(p).expect("parent is not the root");
        if t.age(j) >= t.age(p) {
            w.fail(k);
            continue;
        }
        match t.apply_swap(i, j) {
            Ok(t2) => w.done(k, model, SdState { tree: t2, ..s.clone() }, 0.0),
            Err(_) => w.fail(k),
        }
    }
}

/// Unordered pairs a wide swap may exchange: both non-root, not siblings,
/// neither an ancestor of the other, ages compatible, constraints kept.
pub fn wide_swap_pairs(t: &Tree, model: &SdModel) -> Vec<(usize, usize)> {
    let r = t.root();
    let mut out = vec![];
    for i in 0..t.n_nodes() {
        if i == r {
            continue;
        }
        for j in i + 1..t.n_nodes() {
            if j == r || t.parent(i) == t.parent(j) || t.is_ancestor(i, j) || t.is_ancestor(j, i) {
                continue;
            }
            let (pi, pj) = (t.parent(i).unwrap(), t.parent(j).unwrap());
            if !(t.age(j) < t.age(pi) && t.age(i) < t.age(pj)) {
                continue;
            }
            if !model.constraints.is_empty() {
                match t.apply_swap(i, j) {
                    Ok(t2) if t2.satisfies(&model.constraints) => {}
                    _ => continue,
                }
            }
            out.push((i, j));
        }
    }
    out
}

fn wide_swap<R: Rng + ?Sized>(w: &mut Work, model: &SdModel, rng: &mut R) {
    let sets = w.map(|_, s| wide_swap_pairs(&s.tree, model));
    let sizes: Lanes<usize> = [sets[0].as_ref().map(Vec::len), sets[1].as_ref().map(Vec::len)];
    let pick = choose_uniform(w, sets, rng);
    for k in w.alive() {
        let s = w.state(k);
        let (i, j) = pick[k].expect("live lane");
        match s.tree.apply_swap(i, j) {
            Ok(t2) => {
                let back = wide_swap_pairs(&t2, model).len();
                let lh = (sizes[k].unwrap() as f64).ln() - (back as f64).ln();
                w.done(k, model, SdState { tree: t2, ..s.clone() }, lh);
            }
            Err(_) => w.fail(k),
        }
    }
}

/// Destinations for regrafting the parent of `i`: every branch whose upper end
/// is older than `i`, the root branch included. The two that leave the tree
/// unchanged, `pa(i)` and `sib(i)`, are kept in the set and fail when drawn.
pub fn spr_destinations(t: &Tree, i: usize) -> Vec<usize> {
    (0..t.n_nodes())
        .filter(|&j| j != i && t.parent(j).is_none_or(|q| t.age(q) > t.age(i)))
        .collect()
}

fn spr_time_law(t: &Tree, i: usize, j: usize, theta: f64) -> TimeLaw {
    match t.parent(j) {
        None => TimeLaw::Exp { theta, lo: t.age(j) },
        Some(q) => TimeLaw::Interval(t.age(i).max(t.age(j)), t.age(q)),
    }
}

/// Log probability that an SPR from `from` picks subtree `i`, destination `j`
/// and age `tp`, and lands on the counts of `to`.
fn spr_log_q(model: &SdModel, cfg: &KernelConfig, wide: bool, from: &SdState, to: &SdState, i: usize, j: usize, tp: f64) -> f64 {
    let t = &from.tree;
    let mut lq = -((t.n_nodes() - 1) as f64).ln();
    if wide {
        lq -= (spr_destinations(t, i).len() as f64).ln();
    }
    lq += spr_time_law(t, i, j, cfg.theta).log_density(tp);
    if model.catastrophes {
        lq += spr_count_law(model, t, from, to, j, tp).log_pmf(to.cats.get(j) as u64);
    }
    lq
}

/// Law of the count left on branch `j` after regrafting above it.
fn spr_count_law(model: &SdModel, t: &Tree, from: &SdState, to: &SdState, j: usize, tp: f64) -> CountLaw {
    match t.parent(j) {
        Some(q) => CountLaw::Binomial {
            n: from.cats.get(j) as u64,
            p: (tp - t.age(j)) / (t.age(q) - t.age(j)),
        },
        None => {
            let mut cats = to.cats.clone();
            cats.set(j, 0);
            let (shape, w) = conditional_count_law(model.rho_prior, &to.tree, &cats, j);
            CountLaw::NegBinomial { shape, w }
        }
    }
}

fn spr<R: Rng + ?Sized>(w: &mut Work, model: &SdModel, cfg: &KernelConfig, wide: bool, rng: &mut R) -> Result<(), CouplingError> {
    let sets = w.map(|_, s| non_root(&s.tree));
    let pick_i = choose_uniform(w, sets, rng);
    let dests = w.map(|k, s| {
        let t = &s.tree;
        let i = pick_i[k].unwrap();
        if wide {
            spr_destinations(t, i)
        } else {
            let p = t.parent(i).expect("non-root");
            t.sibling(p).into_iter().collect()
        }
    });
    let mut pick_j = choose_uniform(w, dests, rng);
    for k in w.alive() {
        let t = &w.state(k).tree;
        let i = pick_i[k].unwrap();
        let j = pick_j[k].unwrap();
        if Some(j) == t.parent(i) || Some(j) == t.sibling(i) {
            pick_j[k] = None;
            w.fail(k);
        }
    }
    let laws = w.map(|k, s| spr_time_law(&s.tree, pick_i[k].unwrap(), pick_j[k].unwrap(), cfg.theta));
    let tp = draw_time(&laws, rng)?;

    let mut partial: Lanes<(SdState, usize, usize, f64)> = [None, None];
    for k in w.alive() {
        let s = w.state(k);
        let (i, j, tpk) = (pick_i[k].unwrap(), pick_j[k].unwrap(), tp[k].unwrap());
        let t = &s.tree;
        let p = t.parent(i).unwrap();
        let h = t.sibling(i).unwrap();
        let Ok(t2) = t.apply_spr(i, j, tpk) else {
            w.fail(k);
            continue;
        };
        let mut cats = s.cats.clone();
        if t.parent(p).is_some() {
            cats.set(h, cats.get(h) + cats.get(p));
        } else {
            cats.set(h, 0);
        }
        cats.set(p, 0);
        cats.set(j, 0);
        partial[k] = Some((SdState { tree: t2, cats, ..s.clone() }, i, j, tpk));
    }
    let new_counts: Lanes<u64> = if model.catastrophes {
        let laws: Lanes<CountLaw> = std::array::from_fn(|k| {
            partial[k].as_ref().map(|(to, _, j, tpk)| spr_count_law(model, &w.state(k).tree, w.state(k), to, *j, *tpk))
        });
        draw_counts(&laws, rng)?
    } else {
        [Some(0), Some(0)]
    };
    for k in w.alive() {
        let Some((mut to, i, j, tpk)) = partial[k].take() else { continue };
        let s = w.state(k);
        let t = &s.tree;
        let nj = new_counts[k].unwrap() as u32;
        to.cats.set(j, nj);
        let p = t.parent(i).unwrap();
        if t.parent(j).is_some() {
            to.cats.set(p, s.cats.get(j) - nj);
        }
        let h = t.sibling(i).unwrap();
        let fwd = spr_log_q(model, cfg, wide, s, &to, i, j, tpk);
        let back = spr_log_q(model, cfg, wide, &to, s, i, h, t.age(p));
        w.done(k, model, to, back - fwd);
    }
    Ok(())
}

fn node_time<R: Rng + ?Sized>(w: &mut Work, model: &SdModel, rng: &mut R) -> Result<(), CouplingError> {
    let sets = w.map(|_, s| s.tree.internal_nodes().collect::<Vec<_>>());
    let pick = choose_uniform(w, sets, rng);
    let ivs = w.map(|k, s| {
        let t = &s.tree;
        let i = pick[k].unwrap();
        let [a, b] = t.children(i).unwrap();
        let tj = t.age(a).max(t.age(b));
        match t.parent(i) {
            None => ((t.age(i) + tj) / 2.0, 2.0 * t.age(i) - tj),
            Some(q) => (tj, t.age(q)),
        }
    });
    let times = draw_interval(&ivs, rng);
    let mut staged: Lanes<(SdState, Vec<usize>, f64)> = [None, None];
    for k in w.alive() {
        let s = w.state(k);
        let i = pick[k].unwrap();
        let t = &s.tree;
        let [a, b] = t.children(i).unwrap();
        let tj = t.age(a).max(t.age(b));
        let ti2 = times[k].unwrap();
        let mut to = s.clone();
        to.tree.set_age(i, ti2);
        let lh = if t.parent(i).is_none() { (t.age(i) - tj).ln() - (ti2 - tj).ln() } else { 0.0 };
        let branches = if t.parent(i).is_none() { vec![a, b] } else { vec![i, a, b] };
        staged[k] = Some((to, branches, lh));
    }
    if model.catastrophes {
        let probs = |t: &Tree, br: &[usize]| -> Vec<f64> {
            let total: f64 = br.iter().map(|&v| t.branch_length(v)).sum();
            br.iter().map(|&v| t.branch_length(v) / total).collect()
        };
        let args: Lanes<(u64, Vec<f64>)> = std::array::from_fn(|k| {
            staged[k].as_ref().map(|(to, br, _)| {
                let n: u64 = br.iter().map(|&v| to.cats.get(v) as u64).sum();
                (n, probs(&to.tree, br))
            })
        });
        let drawn = draw(
            &args,
            rng,
            |(n, p), r| sample_multinomial(*n, p, r),
            |(nx, px), (ny, py), r| couple_multinomial(*nx, *ny, px, py, r),
        )?;
        for k in 0..2 {
            let Some((to, br, lh)) = staged[k].as_mut() else { continue };
            let s = w.state(k);
            let old: Vec<u64> = br.iter().map(|&v| s.cats.get(v) as u64).collect();
            let new = drawn[k].as_ref().unwrap();
            *lh += multinomial_log_pmf(&old, &probs(&s.tree, br)) - multinomial_log_pmf(new, &args[k].as_ref().unwrap().1);
            for (&v, &c) in br.iter().zip(new) {
                to.cats.set(v, c as u32);
            }
        }
    }
    for k in w.alive() {
        if let Some((to, _, lh)) = staged[k].take() {
            w.done(k, model, to, lh);
        }
    }
    Ok(())
}

fn leaf_time<R: Rng + ?Sized>(w: &mut Work, model: &SdModel, rng: &mut R) {
    let free: Vec<usize> = (0..model.leaf_ranges.len()).filter(|&i| model.leaf_ranges[i].0 < model.leaf_ranges[i].1).collect();
    let sets = w.map(|_, _| free.clone());
    let pick = choose_uniform(w, sets, rng);
    let ivs = w.map(|k, _| model.leaf_ranges[pick[k].unwrap()]);
    let times = draw_interval(&ivs, rng);
    for k in w.alive() {
        let s = w.state(k);
        let i = pick[k].unwrap();
        let mut to = s.clone();
        to.tree.set_age(i, times[k].unwrap());
        w.done(k, model, to, 0.0);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Rescale {
    Tree,
    Subtree,
    AboveClades,
}

/// Internal nodes not inside any age-calibrated clade.
fn above_clade_nodes(model: &SdModel, t: &Tree) -> Vec<usize> {
    let sets = t.leafsets();
    let mut inside = vec![false; t.n_nodes()];
    for c in model.constraints.iter().filter(|c| c.age.is_some()) {
        for v in t.subtree_nodes(t.mrca(&c.leaves, &sets)) {
            inside[v] = true;
        }
    }
    t.internal_nodes().filter(|&v| !inside[v]).collect()
}

fn rescale_times<R: Rng + ?Sized>(w: &mut Work, model: &SdModel, cfg: &KernelConfig, variant: Rescale, rng: &mut R) {
    let anchor: Lanes<usize> = match variant {
        Rescale::Subtree => {
            let weights = w.map(|_, s| {
                let sets = s.tree.leafsets();
                s.tree.internal_nodes().map(|v| (v, sets[v].len() as f64)).collect::<Vec<_>>()
            });
            choose_weighted(w, weights, rng)
        }
        _ => w.map(|_, s| s.tree.root()),
    };
    let mut targets: Lanes<(Vec<usize>, f64)> = std::array::from_fn(|k| {
        anchor[k].map(|a| {
            let t = &w.state(k).tree;
            match variant {
                Rescale::Tree => (t.internal_nodes().collect(), t.youngest_leaf_age()),
                Rescale::AboveClades => (above_clade_nodes(model, t), t.youngest_leaf_age()),
                Rescale::Subtree => {
                    let sub = t.subtree_nodes(a);
                    let t0 = sub.iter().filter(|&&v| t.is_leaf(v)).map(|&v| t.age(v)).fold(f64::INFINITY, f64::min);
                    (sub.into_iter().filter(|&v| !t.is_leaf(v)).collect(), t0)
                }
            }
        })
    });
    w.keep(&mut targets, |(nodes, _)| !nodes.is_empty());
    let ivs: Lanes<(f64, f64)> = std::array::from_fn(|k| {
        targets[k].as_ref().map(|(nodes, t0)| {
            let t = &w.state(k).tree;
            let ta = nodes.iter().map(|&v| t.age(v)).fold(f64::NEG_INFINITY, f64::max);
            (t0 + (ta - t0) / 2.0, 2.0 * ta - t0)
        })
    });
    let drawn = draw_interval(&ivs, rng);
    for k in w.alive() {
        let s = w.state(k);
        let (nodes, t0) = targets[k].take().unwrap();
        let t = &s.tree;
        let top = *nodes.iter().max_by(|&&a, &&b| t.age(a).total_cmp(&t.age(b))).unwrap();
        let ta2 = drawn[k].unwrap();
        let nu = (ta2 - t0) / (t.age(top) - t0);
        let mut to = s.clone();
        for &v in &nodes {
            let a = if v == top { ta2 } else { t0 + nu * (t.age(v) - t0) };
            to.tree.set_age(v, a);
        }
        let mut exponent = nodes.len() as f64 - 2.0 + cfg.scale_exponent_offset;
        if variant == Rescale::Tree && model.mu.vary {
            to.mu = s.mu / nu;
            exponent -= 1.0;
            if !model.mu.contains(to.mu) {
                w.fail(k);
                continue;
            }
        }
        w.done(k, model, to, exponent * nu.ln());
    }
}

fn branch_weights(t: &Tree) -> Vec<(usize, f64)> {
    non_root(t).into_iter().map(|v| (v, t.branch_length(v))).collect()
}

fn count_weights(s: &SdState) -> Vec<(usize, f64)> {
    non_root(&s.tree).into_iter().map(|v| (v, s.cats.get(v) as f64)).collect()
}

fn cat_add<R: Rng + ?Sized>(w: &mut Work, model: &SdModel, rng: &mut R) {
    let weights = w.map(|_, s| branch_weights(&s.tree));
    let pick = choose_weighted(w, weights, rng);
    for k in w.alive() {
        let s = w.state(k);
        let i = pick[k].unwrap();
        let n = s.cats.total() as f64;
        let ni = s.cats.get(i) as f64;
        let lh = ((ni + 1.0) / (n + 1.0)).ln() - (s.tree.branch_length(i) / s.tree.total_length()).ln();
        let mut to = s.clone();
        to.cats.set(i, s.cats.get(i) + 1);
        w.done(k, model, to, lh);
    }
}

fn cat_delete<R: Rng + ?Sized>(w: &mut Work, model: &SdModel, rng: &mut R) {
    let weights = w.map(|_, s| count_weights(s));
    let pick = choose_weighted(w, weights, rng);
    for k in w.alive() {
        let s = w.state(k);
        let i = pick[k].unwrap();
        let n = s.cats.total() as f64;
        let ni = s.cats.get(i) as f64;
        let lh = (s.tree.branch_length(i) / s.tree.total_length()).ln() - (ni / n).ln();
        let mut to = s.clone();
        to.cats.set(i, s.cats.get(i) - 1);
        w.done(k, model, to, lh);
    }
}

/// Branches a catastrophe on `i` may move to: parent, children and sibling
/// branches, never the root. The relation is symmetric so the move reverses.
pub fn catastrophe_neighbours(t: &Tree, i: usize) -> Vec<usize> {
    let r = t.root();
    let mut out: Vec<usize> = t.parent(i).into_iter().chain(t.children(i).into_iter().flatten()).chain(t.sibling(i)).filter(|&v| v != r).collect();
    out.sort_unstable();
    out
}

fn cat_move<R: Rng + ?Sized>(w: &mut Work, model: &SdModel, rng: &mut R) {
    let weights = w.map(|_, s| count_weights(s));
    let pick_i = choose_weighted(w, weights, rng);
    let sets: Lanes<Vec<usize>> = std::array::from_fn(|k| pick_i[k].map(|i| catastrophe_neighbours(&w.state(k).tree, i)));
    let pick_j = choose_uniform(w, sets, rng);
    for k in w.alive() {
        let s = w.state(k);
        let (i, j) = (pick_i[k].unwrap(), pick_j[k].unwrap());
        let t = &s.tree;
        let lh = (s.cats.get(j) as f64 + 1.0).ln() - (s.cats.get(i) as f64).ln()
            + (catastrophe_neighbours(t, i).len() as f64).ln()
            - (catastrophe_neighbours(t, j).len() as f64).ln();
        let mut to = s.clone();
        to.cats.set(i, s.cats.get(i) - 1);
        to.cats.set(j, s.cats.get(j) + 1);
        w.done(k, model, to, lh);
    }
}

fn cat_resample<R: Rng + ?Sized>(w: &mut Work, model: &SdModel, rng: &mut R) -> Result<(), CouplingError> {
    let weights = w.map(|_, s| branch_weights(&s.tree));
    let pick = choose_weighted(w, weights, rng);
    let laws: Lanes<CountLaw> = std::array::from_fn(|k| {
        pick[k].map(|i| {
            let s = w.state(k);
            let (shape, p) = conditional_count_law(model.rho_prior, &s.tree, &s.cats, i);
            CountLaw::NegBinomial { shape, w: p }
        })
    });
    let counts = draw_counts(&laws, rng)?;
    for k in w.alive() {
        let s = w.state(k);
        let i = pick[k].unwrap();
        let law = laws[k].unwrap();
        let c = counts[k].unwrap();
        let Ok(c32) = u32::try_from(c) else {
            w.fail(k);
            continue;
        };
        let lh = law.log_pmf(s.cats.get(i) as u64) - law.log_pmf(c);
        let mut to = s.clone();
        to.cats.set(i, c32);
        w.done(k, model, to, lh);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Scalar {
    Mu,
    Kappa,
}

fn rescale_scalar<R: Rng + ?Sized>(w: &mut Work, model: &SdModel, which: Scalar, rng: &mut R) {
    let get = |s: &SdState| if which == Scalar::Mu { s.mu } else { s.kappa };
    let ivs = w.map(|_, s| (get(s) / 2.0, 2.0 * get(s)));
    let drawn = draw_interval(&ivs, rng);
    for k in w.alive() {
        let s = w.state(k);
        let v2 = drawn[k].unwrap();
        let spec = if which == Scalar::Mu { model.mu } else { model.kappa };
        let ok = spec.contains(v2) && v2 > 0.0 && (which == Scalar::Mu || v2 < 1.0);
        if !ok {
            w.fail(k);
            continue;
        }
        let mut to = s.clone();
        match which {
            Scalar::Mu => to.mu = v2,
            Scalar::Kappa => to.kappa = v2,
        }
        w.done(k, model, to, -(v2 / get(s)).ln());
    }
}

/// ξ' = 1 − ν(1 − ξ), or `None` when it leaves [0, 1].
pub fn rescale_xi_value(xi: f64, nu: f64) -> Option<f64> {
    let v = 1.0 - nu * (1.0 - xi);
    (0.0..=1.0).contains(&v).then_some(v)
}

fn rescale_xi<R: Rng + ?Sized>(w: &mut Work, model: &SdModel, rng: &mut R) {
    let sets = w.map(|_, s| (0..s.xi.len()).collect::<Vec<_>>());
    let pick = choose_uniform(w, sets, rng);
    let ivs: Lanes<(f64, f64)> = std::array::from_fn(|k| {
        pick[k].map(|i| {
            let g = 1.0 - w.state(k).xi[i];
            (1.0 - 2.0 * g, 1.0 - g / 2.0)
        })
    });
    let drawn = draw_interval(&ivs, rng);
    for k in w.alive() {
        let s = w.state(k);
        let i = pick[k].unwrap();
        let x2 = drawn[k].unwrap();
        if !(0.0..=1.0).contains(&x2) {
            w.fail(k);
            continue;
        }
        let g = 1.0 - s.xi[i];
        let lh = if g > 0.0 { -((1.0 - x2) / g).ln() } else { 0.0 };
        let mut to = s.clone();
        to.xi[i] = x2;
        w.done(k, model, to, lh);
    }
}

fn rescale_all_xi<R: Rng + ?Sized>(w: &mut Work, model: &SdModel, rng: &mut R) {
    let nu = shared_scale(rng);
    for k in w.alive() {
        let s = w.state(k);
        let xi: Option<Vec<f64>> = s.xi.iter().map(|&x| rescale_xi_value(x, nu)).collect();
        let Some(xi) = xi else {
            w.fail(k);
            continue;
        };
        let lh = (s.xi.len() as f64 - 2.0) * nu.ln();
        w.done(k, model, SdState { xi, ..s.clone() }, lh);
    }
}
