#![allow(dead_code)]

use fedgp_core::rng::Rng;
use nalgebra::{DMatrix, DVector};
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// `A A' + eps I` for a random square `A`.
pub fn random_pd(n: usize, rng: &mut Rng) -> DMatrix<f64> {
    let a = gaussian_matrix(n, n, rng);
    &a * a.transpose() + DMatrix::identity(n, n) * 0.1
}

pub fn random_vector(n: usize, rng: &mut Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Positive weights summing to one.
pub fn random_weights(n: usize, rng: &mut Rng) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Conditions `N(mu, cov)` on `x[obs] = values` with dense block algebra:
/// `mu_R + S_RO S_OO^-1 (v - mu_O)` and `S_RR - S_RO S_OO^-1 S_OR`.
/// Returns the full-length mean and covariance with observed rows exact.
pub fn schur_condition(
    mu: &DVector<f64>,
    cov: &DMatrix<f64>,
    obs: &[usize],
    values: &[f64],
) -> (DVector<f64>, DMatrix<f64>) {
    let n = mu.len();
    let rest: Vec<usize> = (0..n).filter(|i| !obs.contains(i)).collect();
    let pick = |rows: &[usize], cols: &[usize]| DMatrix::from_fn(rows.len(), cols.len(), |i, j| cov[(rows[i], cols[j])]);
    let s_oo = pick(obs, obs);
    let s_ro = pick(&rest, obs);
    let s_rr = pick(&rest, &rest);
    let inv = s_oo.try_inverse().expect("observed block invertible");
    let innov = DVector::from_fn(obs.len(), |i, _| values[i] - mu[obs[i]]);
    let mu_r = DVector::from_fn(rest.len(), |i, _| mu[rest[i]]) + &s_ro * &inv * innov;
    let cov_r = s_rr - &s_ro * &inv * s_ro.transpose();
    let mut m = DVector::zeros(n);
    let mut c = DMatrix::zeros(n, n);
    for (i, &o) in obs.iter().enumerate() {
        m[o] = values[i];
    }
    for (a, &i) in rest.iter().enumerate() {
        m[i] = mu_r[a];
        for (b, &j) in rest.iter().enumerate() {
            c[(i, j)] = cov_r[(a, b)];
        }
    }
    (m, c)
}

/// Maximum entrywise relative error between matrices, scaled by the largest
/// entry of either.
pub fn max_rel_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = a.amax().max(b.amax()).max(1.0);
    (a - b).amax() / scale
}

pub struct Setup {
    pub cfg: fedgp_core::engine::FlConfig,
    pub spec: fedgp_core::model::ModelSpec,
    pub train: fedgp_core::datagen::LabeledDataset,
    pub test: fedgp_core::datagen::LabeledDataset,
    pub partition: fedgp_core::datagen::Partition,
}

/// Four blob classes over eight one-label clients.
pub fn small_setup(strategy: fedgp_core::selection::Strategy, seed: u64) -> Setup {
    use fedgp_core::datagen::{gen_synthetic_split, partition_shards};
    let (train, test) = gen_synthetic_split(4, 5, 20, 10, 3.0, seed).unwrap();
    let partition = partition_shards(&train, 8, 1, seed + 1).unwrap();
    let cfg = fedgp_core::engine::FlConfig {
        num_clients: 8,
        clients_per_round: 2,
        total_rounds: 12,
        warmup_rounds: 4,
        gp_interval: 4,
        embed_dim: 3,
        gp_steps: 30,
        batch_size: 5,
        lr: 0.1,
        strategy,
        seed,
        ..Default::default()
    };
    Setup { cfg, spec: fedgp_core::model::ModelSpec::logreg(5, 4), train, test, partition }
}
