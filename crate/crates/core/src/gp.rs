//! Gaussian-process model of per-client loss changes.
//!
//! Each client k carries a latent embedding `x_k` (a column of the `d x N`
//! matrix X). Loss-change vectors are modelled as `N(mu, X'X + jitter * I)`:
//! the homogeneous linear kernel plus a diagonal noise term that keeps the
//! density proper when `d < N`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::rng::Rng;

/// Variances at or below this fraction of the largest diagonal entry are
/// treated as degenerate.
pub const DEGENERATE_RELATIVE: f64 = 1e-12;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix(DMatrix<f64>);

impl EmbeddingMatrix {
    pub fn new(x: DMatrix<f64>) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(invalid("embedding matrix must be non-empty"));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("embedding matrix has non-finite entries".into()));
        }
        Ok(Self(x))
    }

    /// I.i.d. `N(0, std^2)` entries.
    pub fn random(dim: usize, num_clients: usize, std: f64, seed: u64) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| invalid(format!("embedding std: {e}")))?;
        let mut rng = Rng::seed_from_u64(seed);
        Self::new(DMatrix::from_fn(dim, num_clients, |_, _| normal.sample(&mut rng)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn num_clients(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    /// Columns scaled to unit length; zero columns stay zero.
    pub fn normalized(&self) -> DMatrix<f64> {
        let mut m = self.0.clone();
        for mut col in m.column_iter_mut() {
            let n = col.norm();
            if n > 0.0 {
                col /= n;
            }
        }
        m
    }
}

fn symmetric_from_upper(n: usize, f: impl Fn(usize, usize) -> f64) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..=j {
            let v = f(i, j);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// `X'X + jitter * I`, built from one triangle so it is exactly symmetric.
pub fn covariance_from_embeddings(x: &EmbeddingMatrix, jitter: f64) -> DMatrix<f64> {
    let m = x.matrix();
    symmetric_from_upper(m.ncols(), |i, j| {
        let dot = m.column(i).dot(&m.column(j));
        if i == j {
            dot + jitter
        } else {
            dot
        }
    })
}

/// A loss-change observation with its discount weight.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    pub delta_losses: DVector<f64>,
    pub weight: f64,
}

impl WeightedSample {
    pub fn new(delta_losses: DVector<f64>, weight: f64) -> Self {
        Self { delta_losses, weight }
    }
}

fn factor(x: &EmbeddingMatrix, jitter: f64) -> Result<Cholesky<f64, Dyn>> {
    covariance_from_embeddings(x, jitter)
        .cholesky()
        .ok_or_else(|| Error::Numeric("kernel matrix is not positive definite".into()))
}

fn check_samples(n: usize, samples: &[WeightedSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(invalid("no samples"));
    }
    if let Some(s) = samples.iter().find(|s| s.delta_losses.len() != n) {
        return Err(invalid(format!("sample of length {} for {n} clients", s.delta_losses.len())));
    }
    Ok(())
}

/// `sum_i w_i log N(dl_i | 0, X'X + jitter I)`.
pub fn log_likelihood(x: &EmbeddingMatrix, jitter: f64, samples: &[WeightedSample]) -> Result<f64> {
    let n = x.num_clients();
    check_samples(n, samples)?;
    let chol = factor(x, jitter)?;
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let mut total = 0.0;
    for s in samples {
        let mut z = s.delta_losses.clone();
        chol.l_dirty().solve_lower_triangular_mut(&mut z);
        // solve_lower_triangular_mut reads only the lower triangle
        let quad = z.norm_squared();
        total += s.weight * -0.5 * (quad + log_det + n as f64 * LN_2PI);
    }
    Ok(total)
}

/// Negative log-likelihood and its gradient with respect to X.
///
/// With `K = X'X + jitter I`, `alpha_i = K^-1 dl_i` and `W = sum w_i`:
/// `d(-LL)/dX = X (W K^-1 - sum_i w_i alpha_i alpha_i')`.
pub fn neg_log_likelihood_grad(
    x: &EmbeddingMatrix,
    jitter: f64,
    samples: &[WeightedSample],
) -> Result<(f64, DMatrix<f64>)> {
    let n = x.num_clients();
    check_samples(n, samples)?;
    let chol = factor(x, jitter)?;
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let k_inv = chol.inverse();

    let mut inner = DMatrix::<f64>::zeros(n, n);
    let mut nll = 0.0;
    let mut weight_sum = 0.0;
    for s in samples {
        let alpha = chol.solve(&s.delta_losses);
        nll += s.weight * 0.5 * (s.delta_losses.dot(&alpha) + log_det + n as f64 * LN_2PI);
        inner.ger(-s.weight, &alpha, &alpha, 1.0);
        weight_sum += s.weight;
    }
    inner += k_inv * weight_sum;
    let grad = x.matrix() * inner;
    Ok((nll, grad))
}

/// Adam with the standard defaults.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: DMatrix<f64>,
    v: DMatrix<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, rows: usize, cols: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: DMatrix::zeros(rows, cols),
            v: DMatrix::zeros(rows, cols),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut DMatrix<f64>, grad: &DMatrix<f64>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { steps: 500, lr: 0.01 }
    }
}

/// Maximizes the weighted log-likelihood with full-gradient Adam, starting
/// from `init` (warm start).
pub fn train_embeddings(
    init: &EmbeddingMatrix,
    jitter: f64,
    samples: &[WeightedSample],
    opts: TrainOptions,
) -> Result<EmbeddingMatrix> {
    if opts.steps == 0 {
        return Err(invalid("training needs at least one step"));
    }
    if !(jitter > 0.0) {
        return Err(invalid("jitter must be positive"));
    }
    let mut x = init.clone();
    let mut adam = Adam::new(opts.lr, x.dim(), x.num_clients());
    for step in 0..opts.steps {
        let (nll, grad) = neg_log_likelihood_grad(&x, jitter, samples)?;
        if !nll.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite objective at step {step}")));
        }
        adam.step(&mut x.0, &grad);
    }
    Ok(x)
}

/// Mean and covariance of the loss-change model.
#[derive(Debug, Clone, PartialEq)]
pub struct GpState {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GpState {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.shape() != (n, n) {
            return Err(invalid("covariance shape does not match mean"));
        }
        let scale = cov.amax().max(1.0);
        for i in 0..n {
            if cov[(i, i)] < 0.0 {
                return Err(invalid(format!("negative variance at {i}")));
            }
            for j in 0..i {
                if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-9 * scale {
                    return Err(invalid(format!("covariance not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { mean, cov })
    }

    /// Zero-mean prior `N(0, X'X + jitter I)`.
    pub fn prior(x: &EmbeddingMatrix, jitter: f64) -> Self {
        Self { mean: DVector::zeros(x.num_clients()), cov: covariance_from_embeddings(x, jitter) }
    }

    pub fn num_clients(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn std(&self, k: usize) -> f64 {
        self.cov[(k, k)].max(0.0).sqrt()
    }

    pub fn stds(&self) -> DVector<f64> {
        DVector::from_iterator(self.num_clients(), (0..self.num_clients()).map(|k| self.std(k)))
    }

    pub fn degenerate_threshold(&self) -> f64 {
        DEGENERATE_RELATIVE * self.cov.diagonal().max().max(0.0)
    }

    pub fn is_degenerate(&self, k: usize) -> bool {
        let var = self.cov[(k, k)];
        var <= 0.0 || var <= self.degenerate_threshold()
    }

    /// Change of the mean vector when client k is observed at `observed`:
    /// `Sigma[:, k] (observed - mu_k) / Sigma[k, k]`.
    pub fn mean_shift(&self, k: usize, innovation: f64) -> DVector<f64> {
        self.cov.column(k) * (innovation / self.cov[(k, k)])
    }

    /// Posterior after observing client k's loss change.
    pub fn condition(&self, k: usize, observed: f64) -> Result<GpState> {
        self.condition_innovation(k, observed - self.mean[k], Some(observed))
    }

    /// Like [`condition`](Self::condition) with the innovation
    /// `observed - mu_k` supplied directly.
    pub fn condition_innovation(&self, k: usize, innovation: f64, exact_value: Option<f64>) -> Result<GpState> {
        let n = self.num_clients();
        if k >= n {
            return Err(invalid(format!("client {k} out of range {n}")));
        }
        if self.is_degenerate(k) {
            return Err(Error::DegenerateVariance { client: k, variance: self.cov[(k, k)] });
        }
        let var = self.cov[(k, k)];
        let mut mean = &self.mean + self.mean_shift(k, innovation);
        mean[k] = exact_value.unwrap_or(self.mean[k] + innovation);
        let col = self.cov.column(k).clone_owned();
        let mut cov = symmetric_from_upper(n, |i, j| self.cov[(i, j)] - col[i] * col[j] / var);
        cov.row_mut(k).fill(0.0);
        cov.column_mut(k).fill(0.0);
        Ok(GpState { mean, cov })
    }

    /// `sum_i p_i mu_i`.
    pub fn weighted_posterior_objective(&self, p: &[f64]) -> f64 {
        self.mean.iter().zip(p).map(|(m, w)| m * w).sum()
    }
}
