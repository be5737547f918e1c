//! Client-selection strategies.
//!
//! [`fedgp_select`] is the greedy posterior selector: each iteration guesses
//! the loss change of every remaining candidate as `mu_k - alpha_k sigma_k`,
//! conditions the Gaussian model on that guess, and keeps the candidate whose
//! conditioned weighted mean loss change is lowest. [`lemma3_pair`] is the
//! closed-form answer for the first two picks and serves as its oracle.

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gp::GpState;
use crate::rng::Rng;

/// Relative gap under which two criterion values count as a tie.
pub const TIE_RELATIVE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Rand,
    Afl,
    Powd,
    Fedgp,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Rand => "rand",
            Strategy::Afl => "afl",
            Strategy::Powd => "powd",
            Strategy::Fedgp => "fedgp",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rand" | "random" => Ok(Strategy::Rand),
            "afl" => Ok(Strategy::Afl),
            "powd" | "pow-d" => Ok(Strategy::Powd),
            "fedgp" => Ok(Strategy::Fedgp),
            other => Err(invalid(format!("unknown strategy {other:?}"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Annealing state: `alpha_k = a * beta^tau_k`, recomputed from the counts.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionContext {
    tau: Vec<u32>,
    beta: f64,
    scale: f64,
}

impl SelectionContext {
    pub fn new(num_clients: usize, beta: f64) -> Self {
        Self { tau: vec![0; num_clients], beta, scale: 1.0 }
    }

    pub fn with_tau(tau: Vec<u32>, beta: f64) -> Self {
        Self { tau, beta, scale: 1.0 }
    }

    pub fn tau(&self) -> &[u32] {
        &self.tau
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.scale * self.beta.powi(self.tau[k] as i32)
    }

    pub fn alphas(&self) -> Vec<f64> {
        (0..self.tau.len()).map(|k| self.alpha(k)).collect()
    }

    pub fn record_selection(&mut self, selected: &[usize]) {
        for &k in selected {
            self.tau[k] += 1;
        }
    }

    /// Called at every GP training round.
    pub fn reset(&mut self) {
        self.tau.iter_mut().for_each(|t| *t = 0);
    }
}

/// Keeps the best value under `better`, treating near-equal values as ties
/// resolved toward the candidate seen first (lowest id when scanning upward).
struct ArgBest {
    best: Option<(usize, f64)>,
    minimize: bool,
}

impl ArgBest {
    fn new(minimize: bool) -> Self {
        Self { best: None, minimize }
    }

    fn offer(&mut self, k: usize, value: f64) {
        match self.best {
            None => self.best = Some((k, value)),
            Some((_, b)) => {
                let gap = TIE_RELATIVE * b.abs().max(value.abs()).max(f64::MIN_POSITIVE);
                let improves = if self.minimize { value < b - gap } else { value > b + gap };
                if improves {
                    self.best = Some((k, value));
                }
            }
        }
    }

    fn get(&self) -> Option<usize> {
        self.best.map(|(k, _)| k)
    }
}

/// Per-iteration record of the greedy selector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStep {
    pub picked: usize,
    /// `(client, sum_i p_i mu~_i)` for every evaluated candidate.
    pub criteria: Vec<(usize, f64)>,
    /// Candidates skipped for degenerate variance.
    pub skipped: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedGpSelection {
    pub clients: Vec<usize>,
    pub steps: Vec<SelectionStep>,
}

pub fn fedgp_select(state: &GpState, p: &[f64], ctx: &SelectionContext, c: usize) -> Result<Vec<usize>> {
    Ok(fedgp_select_traced(state, p, ctx, c)?.clients)
}

pub fn fedgp_select_traced(state: &GpState, p: &[f64], ctx: &SelectionContext, c: usize) -> Result<FedGpSelection> {
    let n = state.num_clients();
    if p.len() != n || ctx.tau().len() != n {
        return Err(invalid("weights, annealing counts and GP state disagree on N"));
    }
    if c > n {
        return Err(invalid(format!("cannot select {c} of {n} clients")));
    }
    let mut state = state.clone();
    let mut remaining: Vec<bool> = vec![true; n];
    let mut clients = Vec::with_capacity(c);
    let mut steps = Vec::with_capacity(c);

    while clients.len() < c {
        let base = state.weighted_posterior_objective(p);
        let mut best = ArgBest::new(true);
        let mut criteria = Vec::new();
        let mut skipped = Vec::new();
        for k in (0..n).filter(|&k| remaining[k]) {
            if state.is_degenerate(k) {
                skipped.push(k);
                continue;
            }
            // estimate mu_k - alpha_k sigma_k; its innovation is -alpha_k sigma_k
            let innovation = -ctx.alpha(k) * state.std(k);
            let shift = state.mean_shift(k, innovation);
            let gain: f64 = shift.iter().zip(p).map(|(s, w)| s * w).sum();
            best.offer(k, gain);
            criteria.push((k, base + gain));
        }
        if !skipped.is_empty() {
            log::warn!("skipping clients with degenerate posterior variance: {skipped:?}");
        }
        let Some(pick) = best.get() else {
            return Err(Error::Selection(format!(
                "all {} remaining candidates have degenerate variance",
                skipped.len()
            )));
        };
        let innovation = -ctx.alpha(pick) * state.std(pick);
        state = state.condition_innovation(pick, innovation, None)?;
        remaining[pick] = false;
        clients.push(pick);
        steps.push(SelectionStep { picked: pick, criteria, skipped });
    }
    Ok(FedGpSelection { clients, steps })
}

/// Single-iteration criterion `beta^tau_k sum_i p_i sigma_i r_ik`.
pub fn first_pick_criterion(cov: &nalgebra::DMatrix<f64>, p: &[f64], tau: &[u32], beta: f64, k: usize) -> f64 {
    let sk = cov[(k, k)].sqrt();
    let sum: f64 = (0..cov.nrows())
        .map(|i| {
            let si = cov[(i, i)].sqrt();
            p[i] * si * (cov[(i, k)] / (si * sk))
        })
        .sum();
    beta.powi(tau[k] as i32) * sum
}

/// Closed-form first and second picks of the greedy selector for a
/// zero-or-constant mean and unit annealing scale.
pub fn lemma3_pair(cov: &nalgebra::DMatrix<f64>, p: &[f64], tau: &[u32], beta: f64) -> Result<(usize, usize)> {
    let n = cov.nrows();
    if n < 2 || cov.ncols() != n || p.len() != n || tau.len() != n {
        return Err(invalid("lemma3_pair needs a square N >= 2 covariance with matching p and tau"));
    }
    let sigma: Vec<f64> = (0..n).map(|i| cov[(i, i)].sqrt()).collect();
    if let Some(i) = sigma.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::DegenerateVariance { client: i, variance: cov[(i, i)] });
    }
    let r = |i: usize, j: usize| cov[(i, j)] / (sigma[i] * sigma[j]);
    let anneal = |k: usize| beta.powi(tau[k] as i32);
    let single = |k: usize| (0..n).map(|i| p[i] * r(i, k) * sigma[i]).sum::<f64>();

    let mut first = ArgBest::new(false);
    for k in 0..n {
        first.offer(k, anneal(k) * single(k));
    }
    let k1 = first.get().expect("n >= 2");

    let b = single(k1);
    let mut second = ArgBest::new(false);
    for k in (0..n).filter(|&k| k != k1) {
        let rho = r(k, k1);
        let resid = 1.0 - rho * rho;
        if resid <= crate::gp::DEGENERATE_RELATIVE {
            continue;
        }
        second.offer(k, anneal(k) / resid.sqrt() * (single(k) - rho * b));
    }
    let k2 = second
        .get()
        .ok_or_else(|| Error::Selection("every other client is perfectly correlated with the first pick".into()))?;
    Ok((k1, k2))
}

/// Uniform size-`c` subset without replacement, sorted ascending.
pub fn random_select(n: usize, c: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if c > n {
        return Err(invalid(format!("cannot select {c} of {n} clients")));
    }
    let mut picks = index::sample(rng, n, c).into_vec();
    picks.sort_unstable();
    Ok(picks)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AflParams {
    /// Fraction of lowest-valued clients masked out.
    pub alpha1: f64,
    /// Softmax temperature on valuations.
    pub alpha2: f64,
    /// Fraction of the selection drawn uniformly.
    pub alpha3: f64,
}

impl Default for AflParams {
    fn default() -> Self {
        Self { alpha1: 0.75, alpha2: 0.01, alpha3: 0.1 }
    }
}

/// Active-FL style sampling: mask the lowest valuations, draw the bulk of the
/// selection with probabilities `~ exp(alpha2 * loss)` and the rest uniformly.
pub fn afl_select(losses: &[f64], c: usize, params: AflParams, rng: &mut Rng) -> Result<Vec<usize>> {
    let n = losses.len();
    if c > n {
        return Err(invalid(format!("cannot select {c} of {n} clients")));
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(invalid("AFL valuations must be finite"));
    }
    let mut by_value: Vec<usize> = (0..n).collect();
    by_value.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    let masked = ((params.alpha1 * n as f64).floor() as usize).min(n);
    let mut eligible: Vec<usize> = by_value[masked..].to_vec();
    eligible.sort_unstable();

    let weighted = (((1.0 - params.alpha3) * c as f64).ceil() as usize).min(c).min(eligible.len());
    let mut chosen = vec![false; n];
    let mut picks = Vec::with_capacity(c);
    for _ in 0..weighted {
        let max = eligible.iter().map(|&k| params.alpha2 * losses[k]).fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = eligible.iter().map(|&k| (params.alpha2 * losses[k] - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut slot = eligible.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                slot = i;
                break;
            }
            u -= w;
        }
        let k = eligible.remove(slot);
        chosen[k] = true;
        picks.push(k);
    }
    let rest: Vec<usize> = (0..n).filter(|&k| !chosen[k]).collect();
    for i in index::sample(rng, rest.len(), c - picks.len()) {
        picks.push(rest[i]);
    }
    picks.sort_unstable();
    Ok(picks)
}

/// Power-of-choice: `d` uniform candidates, keep the `c` with the largest
/// losses (lowest id on ties). Only candidates' losses are queried.
pub fn powd_select(
    mut loss_of: impl FnMut(usize) -> f64,
    n: usize,
    c: usize,
    d: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    if !(c <= d && d <= n) {
        return Err(invalid(format!("pow-d needs C <= d <= N, got C={c}, d={d}, N={n}")));
    }
    let mut candidates: Vec<(usize, f64)> = index::sample(rng, n, d).into_iter().map(|k| (k, loss_of(k))).collect();
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut picks: Vec<usize> = candidates.into_iter().take(c).map(|(k, _)| k).collect();
    picks.sort_unstable();
    Ok(picks)
}
