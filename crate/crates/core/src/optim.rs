//! Damped Gauss-Newton least squares with finite-difference Jacobians.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct LsqOptions {
    pub max_iter: usize,
    /// Stop once `max |r_i|` falls below this.
    pub residual_tol: f64,
    /// Stop once a full step changes the cost by less than this fraction.
    pub stall_tol: f64,
    pub fd_step: f64,
}

impl Default for LsqOptions {
    fn default() -> Self {
        Self { max_iter: 200, residual_tol: 1e-12, stall_tol: 1e-15, fd_step: 1e-7 }
    }
}

#[derive(Debug, Clone)]
pub struct LsqResult {
    pub x: Vec<f64>,
    pub residuals: Vec<f64>,
    pub iterations: usize,
    /// Residual tolerance met or a stationary point reached.
    pub converged: bool,
}

impl LsqResult {
    pub fn max_abs_residual(&self) -> f64 {
        self.residuals.iter().fold(0.0, |m, r| m.max(r.abs()))
    }
}

fn cost(r: &[f64]) -> f64 {
    0.5 * r.iter().map(|v| v * v).sum::<f64>()
}

fn max_abs(r: &[f64]) -> f64 {
    r.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Minimises `|f(x)|^2 / 2` with Levenberg-Marquardt. Evaluation errors at trial
/// points are treated as rejected steps.
pub fn least_squares<F>(mut f: F, x0: &[f64], opts: &LsqOptions) -> Result<LsqResult>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut r = f(&x)?;
    let m = r.len();
    let mut c = cost(&r);
    let mut mu = 1e-3;
    let mut iterations = 0;
    let mut stalls = 0;

    while iterations < opts.max_iter {
        if max_abs(&r) <= opts.residual_tol {
            return Ok(LsqResult { x, residuals: r, iterations, converged: true });
        }
        iterations += 1;

        let mut jac = DMatrix::zeros(m, n);
        for j in 0..n {
            let h = opts.fd_step * x[j].abs().max(1.0);
            let mut xp = x.clone();
            xp[j] += h;
            let rp = f(&xp)?;
            for i in 0..m {
                jac[(i, j)] = (rp[i] - r[i]) / h;
            }
        }
        let jtj = jac.transpose() * &jac;
        let grad = jac.transpose() * DVector::from_column_slice(&r);
        if grad.amax() <= 1e-30 {
            return Ok(LsqResult { x, residuals: r, iterations, converged: true });
        }
        let floor = 1e-12 * jtj.diagonal().amax().max(1e-300);

        let mut accepted = false;
        for _ in 0..30 {
            let mut lhs = jtj.clone();
            for k in 0..n {
                lhs[(k, k)] += mu * jtj[(k, k)].max(floor);
            }
            let Some(step) = lhs.lu().solve(&(-&grad)) else {
                mu *= 4.0;
                continue;
            };
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            match f(&trial) {
                Ok(rt) if cost(&rt) < c => {
                    let rel = (c - cost(&rt)) / c.max(1e-300);
                    stalls = if rel < opts.stall_tol { stalls + 1 } else { 0 };
                    x = trial;
                    r = rt;
                    c = cost(&r);
                    mu = (mu / 3.0).max(1e-12);
                    accepted = true;
                    break;
                }
                _ => mu *= 4.0,
            }
        }
        if !accepted || stalls >= 3 {
            return Ok(LsqResult { x, residuals: r, iterations, converged: true });
        }
    }
    let converged = max_abs(&r) <= opts.residual_tol;
    Ok(LsqResult { x, residuals: r, iterations, converged })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock_residuals() {
        let res =
            least_squares(|x| Ok(vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]]), &[-1.2, 1.0], &LsqOptions::default())
                .unwrap();
        assert!(res.converged);
        assert!((res.x[0] - 1.0).abs() < 1e-8 && (res.x[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn overdetermined_line_fit_is_stationary() {
        let pts = [(0.0, 1.0), (1.0, 2.9), (2.0, 5.1), (3.0, 7.0)];
        let res = least_squares(
            |p| Ok(pts.iter().map(|(t, y)| p[0] + p[1] * t - y).collect()),
            &[0.0, 0.0],
            &LsqOptions::default(),
        )
        .unwrap();
        assert!(res.converged);
        // normal equations of the 4-point fit
        assert!((res.x[1] - 2.02).abs() < 1e-8);
        assert!((res.x[0] - 0.97).abs() < 1e-8);
    }
}
