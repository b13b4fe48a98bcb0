//! Maximal couplings and the per-pair random stream.
//!
//! Every coupler returns a [`CoupledDraw`]; `matched` is set only when the two
//! values are bitwise identical, which is what lets coupled chains meet exactly.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Gamma, Poisson};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

/// Upper bound on residual rejection rounds in [`couple_generic`].
pub const DEFAULT_REJECTION_CAP: u64 = 1_000_000;

/// Seekable ChaCha8 stream. The key comes from the master seed and the stream
/// id from the caller, so distinct ids never overlap.
#[derive(Clone, Debug)]
pub struct RandomStream {
    rng: ChaCha8Rng,
}

impl RandomStream {
    pub fn new(master_seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(stream);
        RandomStream { rng }
    }

    /// Stream for pair `pair` at the `lag_index`-th lag of an experiment.
    pub fn for_pair(master_seed: u64, lag_index: u32, pair: u32) -> Self {
        Self::new(master_seed, (u64::from(lag_index) << 32) | u64::from(pair))
    }

    /// U(0, 1) draw.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }
}

impl RngCore for RandomStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoupledDraw<T> {
    pub x: T,
    pub y: T,
    pub matched: bool,
}

impl<T: Clone> CoupledDraw<T> {
    fn same(v: T) -> Self {
        CoupledDraw { x: v.clone(), y: v, matched: true }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CouplingError {
    #[error("rejection coupler exceeded {0} rounds; a density is probably wrong")]
    RejectionCap(u64),
}

/// One uniform shared by both chains.
pub fn shared_uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>()
}

/// Common scale factor ν ~ U(1/2, 2).
pub fn shared_scale<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    0.5 + 1.5 * rng.random::<f64>()
}

/// Maximal coupling of Bern(p) and Bern(q) through a shared uniform.
pub fn couple_bernoulli<R: Rng + ?Sized>(p: f64, q: f64, rng: &mut R) -> CoupledDraw<bool> {
    let u = rng.random::<f64>();
    let (x, y) = (u < p, u < q);
    CoupledDraw { x, y, matched: x == y }
}

/// Rejection-based maximal coupling of two laws given by samplers and log densities.
///
/// Draw X ~ p and keep (X, X) when U·p(X) ≤ q(X). Otherwise draw Y ~ q until
/// U·q(Y) > p(Y) and return (X, Y).
pub fn couple_generic<T, R, SP, LP, SQ, LQ>(
    mut sample_p: SP,
    log_p: LP,
    mut sample_q: SQ,
    log_q: LQ,
    rng: &mut R,
    cap: u64,
) -> Result<CoupledDraw<T>, CouplingError>
where
    T: Clone,
    R: Rng + ?Sized,
    SP: FnMut(&mut R) -> T,
    LP: Fn(&T) -> f64,
    SQ: FnMut(&mut R) -> T,
    LQ: Fn(&T) -> f64,
{
    let x = sample_p(rng);
    if rng.random::<f64>().ln() + log_p(&x) <= log_q(&x) {
        return Ok(CoupledDraw::same(x));
    }
    for _ in 0..cap {
        let y = sample_q(rng);
        if rng.random::<f64>().ln() + log_q(&y) > log_p(&y) {
            return Ok(CoupledDraw { x, y, matched: false });
        }
    }
    Err(CouplingError::RejectionCap(cap))
}

/// Index drawn with probability proportional to `weights`.
pub fn sample_weighted<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    debug_assert!(total > 0.0, "weights must have positive mass");
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (k, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            if u < w {
                return k;
            }
            u -= w;
            last = k;
        }
    }
    last
}

/// Maximal coupling of two finite distributions over keys of type `T`.
///
/// Weights need not be normalised. With probability Σ_k min(p_k, q_k) both
/// chains receive one key drawn from the overlap; otherwise each draws
/// independently from its own residual.
pub fn couple_categorical<T, R>(px: &[(T, f64)], py: &[(T, f64)], rng: &mut R) -> CoupledDraw<T>
where
    T: Ord + Clone,
    R: Rng + ?Sized,
{
    let sx: f64 = px.iter().map(|(_, w)| w).sum();
    let sy: f64 = py.iter().map(|(_, w)| w).sum();
    let mut keys: Vec<(T, f64, f64)> = Vec::with_capacity(px.len() + py.len());
    for (k, w) in px {
        keys.push((k.clone(), w / sx, 0.0));
    }
    for (k, w) in py {
        keys.push((k.clone(), 0.0, w / sy));
    }
    keys.sort_by(|a, b| a.0.cmp(&b.0));
    let mut merged: Vec<(T, f64, f64)> = Vec::with_capacity(keys.len());
    for (k, a, b) in keys {
        match merged.last_mut() {
            Some(last) if last.0 == k => {
                last.1 += a;
                last.2 += b;
            }
            _ => merged.push((k, a, b)),
        }
    }
    let overlap: Vec<f64> = merged.iter().map(|(_, a, b)| a.min(*b)).collect();
    let omega: f64 = overlap.iter().sum();
    let rx: Vec<f64> = merged.iter().zip(&overlap).map(|((_, a, _), m)| a - m).collect();
    let ry: Vec<f64> = merged.iter().zip(&overlap).map(|((_, _, b), m)| b - m).collect();
    let u = rng.random::<f64>();
    let residual_empty = !rx.iter().any(|&w| w > 0.0) || !ry.iter().any(|&w| w > 0.0);
    if u < omega || residual_empty {
        let k = sample_weighted(&overlap, rng);
        return CoupledDraw::same(merged[k].0.clone());
    }
    let kx = sample_weighted(&rx, rng);
    let ky = sample_weighted(&ry, rng);
    CoupledDraw { x: merged[kx].0.clone(), y: merged[ky].0.clone(), matched: false }
}

/// Maximal coupling of uniform laws on two finite sets. Matches with
/// probability |A∩B| / max(|A|, |B|).
pub fn couple_discrete_uniform<T, R>(a: &[T], b: &[T], rng: &mut R) -> CoupledDraw<T>
where
    T: Ord + Clone,
    R: Rng + ?Sized,
{
    let pa: Vec<(T, f64)> = a.iter().map(|v| (v.clone(), 1.0)).collect();
    let pb: Vec<(T, f64)> = b.iter().map(|v| (v.clone(), 1.0)).collect();
    couple_categorical(&pa, &pb, rng)
}

/// Draw from U(lo, hi); a degenerate interval is a point mass.
pub fn sample_interval<R: Rng + ?Sized>((lo, hi): (f64, f64), rng: &mut R) -> f64 {
    if hi <= lo {
        return lo;
    }
    let t = lo + rng.random::<f64>() * (hi - lo);
    // Guard the open upper end against rounding.
    if t >= hi { lo } else { t }
}

/// Maximal coupling of U(I1) and U(I2); matches with probability
/// |I1∩I2| / max(|I1|, |I2|). Degenerate intervals are point masses.
pub fn couple_uniform_interval<R: Rng + ?Sized>(i1: (f64, f64), i2: (f64, f64), rng: &mut R) -> CoupledDraw<f64> {
    let (w1, w2) = (i1.1 - i1.0, i2.1 - i2.0);
    if w1 <= 0.0 || w2 <= 0.0 {
        let x = sample_interval(i1, rng);
        let y = sample_interval(i2, rng);
        return CoupledDraw { x, y, matched: x.to_bits() == y.to_bits() };
    }
    if i1 == i2 {
        return CoupledDraw::same(sample_interval(i1, rng));
    }
    let ov = (i1.0.max(i2.0), i1.1.min(i2.1));
    let o = (ov.1 - ov.0).max(0.0);
    let wmax = w1.max(w2);
    if rng.random::<f64>() < o / wmax {
        return CoupledDraw::same(sample_interval(ov, rng));
    }
    let x = interval_residual(i1, ov, o, wmax, rng);
    let y = interval_residual(i2, ov, o, wmax, rng);
    CoupledDraw { x, y, matched: false }
}

/// Draw from U(I) minus its share of the overlap: density 1/|I| outside the
/// overlap and 1/|I| - 1/wmax inside it.
fn interval_residual<R: Rng + ?Sized>(i: (f64, f64), ov: (f64, f64), o: f64, wmax: f64, rng: &mut R) -> f64 {
    let w = i.1 - i.0;
    let (left, right) = if o > 0.0 { ((i.0, ov.0), (ov.1, i.1)) } else { ((i.0, i.1), (i.1, i.1)) };
    let wl = (left.1 - left.0).max(0.0);
    let wr = (right.1 - right.0).max(0.0);
    let inside = if o > 0.0 { o * (1.0 / w - 1.0 / wmax).max(0.0) * w } else { 0.0 };
    let k = sample_weighted(&[wl, wr, inside], rng);
    match k {
        0 => sample_interval(left, rng),
        1 => sample_interval(right, rng),
        _ => sample_interval(ov, rng),
    }
}

/// Exp(θ) shifted to start at `lo`.
pub fn sample_shifted_exp<R: Rng + ?Sized>(theta: f64, lo: f64, rng: &mut R) -> f64 {
    lo - (1.0 - rng.random::<f64>()).ln() / theta
}

/// Log density of Exp(θ) shifted to start at `lo`.
pub fn shifted_exp_log_density(theta: f64, lo: f64, t: f64) -> f64 {
    if t < lo { f64::NEG_INFINITY } else { theta.ln() - theta * (t - lo) }
}

/// Maximal coupling of Exp(θ) restricted to [a_p, ∞) and to [a_q, ∞).
///
/// Matches with probability exp(-θ|a_p - a_q|) on a common draw above the
/// larger bound. Otherwise the chain with the lower bound draws from Exp(θ)
/// truncated to [lower, upper) and the other draws afresh above its own bound.
pub fn couple_trunc_exponential<R: Rng + ?Sized>(theta: f64, a_p: f64, a_q: f64, rng: &mut R) -> CoupledDraw<f64> {
    let (lo, hi) = (a_p.min(a_q), a_p.max(a_q));
    let gap = hi - lo;
    if rng.random::<f64>() < (-theta * gap).exp() {
        return CoupledDraw::same(sample_shifted_exp(theta, hi, rng));
    }
    let mass = -(-theta * gap).exp_m1();
    let mut low = lo - (1.0 - rng.random::<f64>() * mass).ln() / theta;
    if low >= hi {
        low = lo;
    }
    let high = sample_shifted_exp(theta, hi, rng);
    if a_p <= a_q {
        CoupledDraw { x: low, y: high, matched: false }
    } else {
        CoupledDraw { x: high, y: low, matched: false }
    }
}

/// Count laws used by catastrophe proposals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CountLaw {
    Poisson { mean: f64 },
    /// Γ(A+k)/(Γ(A) k!) (1-w)^A w^k.
    NegBinomial { shape: f64, w: f64 },
    Binomial { n: u64, p: f64 },
}

impl CountLaw {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match *self {
            CountLaw::Poisson { mean } => poisson(mean, rng),
            CountLaw::NegBinomial { shape, w } => {
                if w <= 0.0 {
                    return 0;
                }
                let rate = Gamma::new(shape, w / (1.0 - w)).expect("valid Gamma").sample(rng);
                poisson(rate, rng)
            }
            CountLaw::Binomial { n, p } => {
                if n == 0 || p <= 0.0 {
                    0
                } else if p >= 1.0 {
                    n
                } else {
                    Binomial::new(n, p).expect("valid Binomial").sample(rng)
                }
            }
        }
    }

    pub fn log_pmf(&self, k: u64) -> f64 {
        let kf = k as f64;
        match *self {
            CountLaw::Poisson { mean } => {
                if mean <= 0.0 {
                    return if k == 0 { 0.0 } else { f64::NEG_INFINITY };
                }
                kf * mean.ln() - mean - ln_gamma(kf + 1.0)
            }
            CountLaw::NegBinomial { shape, w } => crate::model::neg_binomial_log_pmf(shape, w, k),
            CountLaw::Binomial { n, p } => {
                if k > n {
                    return f64::NEG_INFINITY;
                }
                let m = (n - k) as f64;
                let head = if k == 0 { 0.0 } else { kf * p.ln() };
                let tail = if k == n { 0.0 } else { m * (-p).ln_1p() };
                ln_gamma(n as f64 + 1.0) - ln_gamma(kf + 1.0) - ln_gamma(m + 1.0) + head + tail
            }
        }
    }
}

fn poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as u64
}

/// Maximal coupling of two count laws through the rejection coupler.
pub fn couple_counts<R: Rng + ?Sized>(p: CountLaw, q: CountLaw, rng: &mut R) -> Result<CoupledDraw<u64>, CouplingError> {
    couple_generic(|r: &mut R| p.sample(r), |k| p.log_pmf(*k), |r: &mut R| q.sample(r), |k| q.log_pmf(*k), rng, DEFAULT_REJECTION_CAP)
}

pub fn sample_multinomial<R: Rng + ?Sized>(n: u64, probs: &[f64], rng: &mut R) -> Vec<u64> {
    let mut out = vec![0; probs.len()];
    let mut left = n;
    let mut mass = 1.0;
    for (k, &p) in probs.iter().enumerate() {
        if left == 0 {
            break;
        }
        if k + 1 == probs.len() {
            out[k] = left;
            break;
        }
        let share = if mass > 0.0 { (p / mass).clamp(0.0, 1.0) } else { 0.0 };
        let c = CountLaw::Binomial { n: left, p: share }.sample(rng);
        out[k] = c;
        left -= c;
        mass -= p;
    }
    out
}

pub fn multinomial_log_pmf(counts: &[u64], probs: &[f64]) -> f64 {
    let n: u64 = counts.iter().sum();
    let mut lp = ln_gamma(n as f64 + 1.0);
    for (&k, &p) in counts.iter().zip(probs) {
        if k > 0 {
            if p <= 0.0 {
                return f64::NEG_INFINITY;
            }
            lp += k as f64 * p.ln() - ln_gamma(k as f64 + 1.0);
        }
    }
    lp
}

/// Couples multinomial count vectors when the totals agree; otherwise the two
/// vectors are drawn independently.
pub fn couple_multinomial<R: Rng + ?Sized>(
    n_x: u64,
    n_y: u64,
    probs_x: &[f64],
    probs_y: &[f64],
    rng: &mut R,
) -> Result<CoupledDraw<Vec<u64>>, CouplingError> {
    if n_x != n_y {
        let x = sample_multinomial(n_x, probs_x, rng);
        let y = sample_multinomial(n_y, probs_y, rng);
        let matched = x == y;
        return Ok(CoupledDraw { x, y, matched });
    }
    couple_generic(
        |r: &mut R| sample_multinomial(n_x, probs_x, r),
        |c: &Vec<u64>| multinomial_log_pmf(c, probs_x),
        |r: &mut R| sample_multinomial(n_y, probs_y, r),
        |c: &Vec<u64>| multinomial_log_pmf(c, probs_y),
        rng,
        DEFAULT_REJECTION_CAP,
    )
}
