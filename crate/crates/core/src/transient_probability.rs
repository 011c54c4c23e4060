//! Finite-horizon distributions by uniformization.

use nalgebra::{DMatrix, RowDVector};
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, Result};
use crate::sparse::SparseGenerator;

pub const DEFAULT_SAFETY: f64 = 1.02;
pub const DEFAULT_EPSILON: f64 = 1e-10;
/// Truncation tolerances at or above this are rejected.
pub const MAX_EPSILON: f64 = 0.1;
/// Largest chain the dense-exponential oracle accepts.
pub const ORACLE_MAX_STATES: usize = 400;

/// Probability vector at a horizon with its truncation certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct TransientDistribution {
    pub probabilities: Vec<f64>,
    pub horizon: f64,
    pub truncation_n: usize,
    /// Poisson mass dropped by the truncation.
    pub tail_bound: f64,
}

/// `P = I + A / lambda` in CSR layout with the rate it was built with.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformizedChain {
    pub lambda: f64,
    pub p_matrix: SparseGenerator,
}

pub fn uniformize(g: &SparseGenerator, safety: f64) -> Result<UniformizedChain> {
    if !(safety >= 1.0) {
        return Err(invalid(format!("uniformization safety {safety} below 1")));
    }
    let max = g.max_exit_rate();
    let lambda = if max == 0.0 { 1.0 } else { safety * max };
    let p_matrix = g.map_values(|i, j, v| if i == j { 1.0 + v / lambda } else { v / lambda });
    Ok(UniformizedChain { lambda, p_matrix })
}

fn check_epsilon(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps < MAX_EPSILON) {
        return Err(invalid(format!("truncation tolerance {eps} outside (0, {MAX_EPSILON})")));
    }
    Ok(())
}

/// Poisson probabilities `psi(lt, 0..=n_max)` where `n_max` is the smallest
/// count whose right tail is below `eps`. Returns the weights and the tail.
pub fn poisson_weights(lt: f64, eps: f64) -> Result<(Vec<f64>, f64)> {
    check_epsilon(eps)?;
    if !(lt >= 0.0) || !lt.is_finite() {
        return Err(invalid(format!("Poisson mean {lt} must be finite and non-negative")));
    }
    if lt == 0.0 {
        return Ok((vec![1.0], 0.0));
    }
    let n_max = poisson_truncation(lt, eps)?;
    let w = CalendarClock.poisson_weights(1.0, lt, n_max)?;
    let tail = (1.0 - w.iter().sum::<f64>()).max(0.0);
    Ok((w, tail))
}

/// Smallest `n` with `P(N > n) < eps` for `N ~ Poisson(lt)`.
pub fn poisson_truncation(lt: f64, eps: f64) -> Result<usize> {
    if lt == 0.0 {
        return Ok(0);
    }
    check_epsilon(eps)?;
    let ln_lt = lt.ln();
    let mut lp = -lt;
    let mut cdf = lp.exp();
    let mut n = 0usize;
    while 1.0 - cdf >= eps {
        n += 1;
        lp += ln_lt - (n as f64).ln();
        cdf += lp.exp();
        if n as f64 > lt + 60.0 * lt.sqrt() + 200.0 {
            break;
        }
    }
    Ok(n)
}

fn check_distribution(p0: &[f64], n: usize) -> Result<()> {
    if p0.len() != n {
        return Err(invalid(format!("distribution has {} entries for {n} states", p0.len())));
    }
    let sum: f64 = p0.iter().sum();
    if p0.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-10 {
        return Err(invalid(format!("initial distribution must be non-negative and sum to 1 (sum = {sum})")));
    }
    Ok(())
}

impl UniformizedChain {
    pub fn dim(&self) -> usize {
        self.p_matrix.dim()
    }

    /// `sum_n w_n p0 P^n` using vector-matrix products only.
    pub fn mix_forward(&self, p0: &[f64], weights: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut acc = vec![0.0; n];
        let mut cur = p0.to_vec();
        let mut next = vec![0.0; n];
        for (k, &w) in weights.iter().enumerate() {
            if k > 0 {
                self.p_matrix.left_mul_into(&cur, &mut next);
                std::mem::swap(&mut cur, &mut next);
            }
            if w != 0.0 {
                acc.iter_mut().zip(&cur).for_each(|(a, c)| *a += w * c);
            }
        }
        acc
    }

    /// `sum_n w_n P^n v`, the adjoint of [`mix_forward`](Self::mix_forward).
    pub fn mix_backward(&self, v: &[f64], weights: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut acc = vec![0.0; n];
        let mut cur = v.to_vec();
        let mut next = vec![0.0; n];
        for (k, &w) in weights.iter().enumerate() {
            if k > 0 {
                self.p_matrix.right_mul_into(&cur, &mut next);
                std::mem::swap(&mut cur, &mut next);
            }
            if w != 0.0 {
                acc.iter_mut().zip(&cur).for_each(|(a, c)| *a += w * c);
            }
        }
        acc
    }

    pub fn transient(&self, p0: &[f64], t: f64, eps: f64) -> Result<TransientDistribution> {
        check_distribution(p0, self.dim())?;
        if !(t >= 0.0) {
            return Err(invalid(format!("horizon {t} must be non-negative")));
        }
        check_epsilon(eps)?;
        if t == 0.0 {
            return Ok(TransientDistribution {
                probabilities: p0.to_vec(),
                horizon: 0.0,
                truncation_n: 0,
                tail_bound: 0.0,
            });
        }
        let (w, tail) = poisson_weights(self.lambda * t, eps)?;
        let mut probabilities = self.mix_forward(p0, &w);
        probabilities.iter_mut().for_each(|p| *p = p.max(0.0));
        Ok(TransientDistribution { probabilities, horizon: t, truncation_n: w.len() - 1, tail_bound: tail })
    }

    /// Conditional expectations `E[v(X_t) | X_0 = i]`.
    pub fn expectation(&self, v: &[f64], t: f64, eps: f64) -> Result<Vec<f64>> {
        if v.len() != self.dim() {
            return Err(invalid("payoff length differs from state count"));
        }
        if t == 0.0 {
            return Ok(v.to_vec());
        }
        let (w, _) = poisson_weights(self.lambda * t, eps)?;
        Ok(self.mix_backward(v, &w))
    }
}

/// Distribution at `t` of the chain with generator `g` started from `p0`.
pub fn transient_distribution(p0: &[f64], g: &SparseGenerator, t: f64, eps: f64) -> Result<TransientDistribution> {
    check_epsilon(eps)?;
    if g.max_exit_rate() == 0.0 {
        check_distribution(p0, g.dim())?;
        return Ok(TransientDistribution { probabilities: p0.to_vec(), horizon: t, truncation_n: 0, tail_bound: 0.0 });
    }
    uniformize(g, DEFAULT_SAFETY)?.transient(p0, t, eps)
}

/// Activity-scaled generator `y g`.
pub fn scale_generator(g: &SparseGenerator, y: f64) -> Result<SparseGenerator> {
    if !(y >= 0.0) {
        return Err(invalid(format!("activity {y} must be non-negative")));
    }
    Ok(g.scaled(y))
}

/// Law of a non-decreasing random clock `T_t`.
pub trait TimeChangeLaw {
    /// `E[exp(-u T_t)]`.
    fn laplace(&self, t: f64, u: f64) -> f64;
    /// `p`-quantile of `T_t`.
    fn quantile(&self, t: f64, p: f64) -> Result<f64>;
    /// `w_n = E[(lambda T_t)^n e^{-lambda T_t}] / n!` for `n = 0..=n_max`.
    fn poisson_weights(&self, t: f64, lambda: f64, n_max: usize) -> Result<Vec<f64>>;
}

/// Deterministic clock `T_t = t`.
#[derive(Debug, Clone, Copy, Default)]
pub struct CalendarClock;

impl TimeChangeLaw for CalendarClock {
    fn laplace(&self, t: f64, u: f64) -> f64 {
        (-u * t).exp()
    }

    fn quantile(&self, t: f64, _p: f64) -> Result<f64> {
        Ok(t)
    }

    fn poisson_weights(&self, t: f64, lambda: f64, n_max: usize) -> Result<Vec<f64>> {
        let lt = lambda * t;
        if lt == 0.0 {
            let mut w = vec![0.0; n_max + 1];
            w[0] = 1.0;
            return Ok(w);
        }
        Ok((0..=n_max).map(|n| (-lt + n as f64 * lt.ln() - ln_gamma(n as f64 + 1.0)).exp()).collect())
    }
}

/// Quantile level defining the largest clock value kept by the truncation.
pub const CLOCK_QUANTILE: f64 = 1.0 - 1e-8;

/// Slack on the weight sum beyond the truncation tolerance before the clock
/// law is rejected.
const WEIGHT_SUM_SLACK: f64 = 1e-6;

/// Weights of a uniformized chain run on the clock `law` up to `t`.
pub fn time_changed_weights(law: &dyn TimeChangeLaw, lambda: f64, t: f64, eps: f64) -> Result<Vec<f64>> {
    let tau_max = law.quantile(t, CLOCK_QUANTILE)?;
    let n_max = poisson_truncation(lambda * tau_max, eps)?;
    let w = law.poisson_weights(t, lambda, n_max)?;
    if let Some((n, v)) = w.iter().enumerate().find(|(_, v)| !(**v >= -1e-15)) {
        return Err(invalid(format!("clock weight w[{n}] = {v} is negative")));
    }
    let sum: f64 = w.iter().sum();
    if sum > 1.0 + 1e-9 || sum < 1.0 - eps - (1.0 - CLOCK_QUANTILE) - WEIGHT_SUM_SLACK {
        return Err(invalid(format!("clock weights sum to {sum}, not toward 1")));
    }
    Ok(w.into_iter().map(|v| v.max(0.0)).collect())
}

/// Distribution at calendar time `t` of the chain run on the random clock `law`.
pub fn time_changed_distribution(
    p0: &[f64],
    g: &SparseGenerator,
    law: &dyn TimeChangeLaw,
    t: f64,
    eps: f64,
) -> Result<TransientDistribution> {
    check_distribution(p0, g.dim())?;
    check_epsilon(eps)?;
    if t == 0.0 {
        return Ok(TransientDistribution {
            probabilities: p0.to_vec(),
            horizon: 0.0,
            truncation_n: 0,
            tail_bound: 0.0,
        });
    }
    let chain = uniformize(g, DEFAULT_SAFETY)?;
    let w = time_changed_weights(law, chain.lambda, t, eps)?;
    let tail = (1.0 - w.iter().sum::<f64>()).max(0.0);
    let mut probabilities = chain.mix_forward(p0, &w);
    probabilities.iter_mut().for_each(|p| *p = p.max(0.0));
    Ok(TransientDistribution { probabilities, horizon: t, truncation_n: w.len() - 1, tail_bound: tail })
}

/// `p0 exp(t A)` by dense scaling and squaring. Oracle for small chains.
pub fn dense_transient(p0: &[f64], g: &SparseGenerator, t: f64) -> Result<Vec<f64>> {
    if g.dim() > ORACLE_MAX_STATES {
        return Err(invalid(format!("dense oracle limited to {ORACLE_MAX_STATES} states, got {}", g.dim())));
    }
    let e: DMatrix<f64> = (g.to_dense() * t).exp();
    let row = RowDVector::from_row_slice(p0) * e;
    Ok(row.iter().copied().collect())
}
