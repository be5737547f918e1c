//! Minimum-norm client sizes under label-total constraints:
//! `min x'x  s.t.  Qx = d, x >= QP_FLOOR`.
//!
//! Solved through the dual. For multipliers `nu` the minimizing sizes are
//! `x(nu) = max(floor, Q'nu)`, and the dual is a concave piecewise quadratic in
//! only `L` variables, maximized by damped semismooth Newton. The active set
//! settles after a few steps, after which the iteration is exact. On an
//! infeasible instance the dual is unbounded and `nu` runs off.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};

/// Lower bound on every client size (one example).
pub const QP_FLOOR: f64 = 1.0;
pub const QP_MAX_ITERATIONS: usize = 500;
const RELATIVE_TOLERANCE: f64 = 1e-6;
const POLISH_TOLERANCE: f64 = 1e-11;
const DIVERGED: f64 = 1e12;

struct Dual<'a> {
    q: &'a DMatrix<f64>,
    d: &'a DVector<f64>,
}

impl Dual<'_> {
    fn primal(&self, nu: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let z = self.q.tr_mul(nu);
        let x = z.map(|v| v.max(QP_FLOOR));
        (z, x)
    }

    /// `x'x/2 - nu'(Qx - d)` at the minimizing `x`.
    fn value(&self, nu: &DVector<f64>) -> f64 {
        let (z, x) = self.primal(nu);
        0.5 * x.norm_squared() - z.dot(&x) + nu.dot(self.d)
    }
}

fn solve_regularized(h: DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let scale = h.diagonal().amax().max(1.0);
    let mut ridge = 1e-12 * scale;
    for _ in 0..8 {
        let mut m = h.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += ridge;
        }
        if let Some(c) = m.cholesky() {
            return Some(c.solve(rhs));
        }
        ridge *= 1e3;
    }
    None
}

pub fn solve_balance_qp(q: &DMatrix<f64>, d: &DVector<f64>) -> Result<DVector<f64>> {
    let (labels, clients) = q.shape();
    if labels == 0 || clients == 0 {
        return Err(invalid("fraction matrix must be non-empty"));
    }
    if d.len() != labels {
        return Err(invalid(format!("d has length {} but Q has {labels} rows", d.len())));
    }
    if d.iter().any(|&v| !(v.is_finite() && v >= 0.0)) || q.iter().any(|v| !v.is_finite()) {
        return Err(invalid("Q and d must be finite with d >= 0"));
    }

    let dual = Dual { q, d };
    let scale = d.amax().max(1.0);
    let tol = RELATIVE_TOLERANCE * scale;

    // Start from the unconstrained minimum-norm multipliers.
    let mut nu = solve_regularized(q * q.transpose(), d).unwrap_or_else(|| DVector::zeros(labels));
    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < QP_MAX_ITERATIONS {
        iterations += 1;
        let (z, x) = dual.primal(&nu);
        let grad = d - q * &x;
        residual = grad.amax();
        if residual <= tol && best.as_ref().is_none_or(|(r, _)| residual < *r) {
            best = Some((residual, x.clone()));
        }
        if residual <= POLISH_TOLERANCE * scale {
            break;
        }
        if nu.amax() > DIVERGED * scale {
            break;
        }
        let mut h = DMatrix::zeros(labels, labels);
        for k in (0..clients).filter(|&k| z[k] > QP_FLOOR) {
            let col = q.column(k);
            h.ger(1.0, &col, &col, 1.0);
        }
        let Some(step) = solve_regularized(h, &grad) else { break };
        let slope = grad.dot(&step);
        let base = dual.value(&nu);
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let trial = &nu + &step * t;
            if dual.value(&trial) >= base + 1e-4 * t * slope {
                nu = trial;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    match best {
        Some((_, x)) => Ok(x),
        None => Err(Error::Infeasible { iterations, residual }),
    }
}
