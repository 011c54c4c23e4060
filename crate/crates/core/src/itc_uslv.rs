//! Implied time change: a subordinated chain whose level moves run on the
//! clock `theta T_t` and within-level moves on `T_t`, with the dilaton `theta`
//! calibrated node by node by minimum cross entropy against option quotes.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use statrs::distribution::{ContinuousCDF, Gamma};
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, Error, Result};
use crate::grids::ThetaGrid;
use crate::markov_generator::GeneratorSplit;
use crate::sparse::SparseGenerator;
use crate::transient_probability::{time_changed_distribution, CalendarClock, TimeChangeLaw, TransientDistribution};

/// `(1 + nu u)^(-t / nu)`, the Laplace transform of a gamma clock with unit mean rate.
pub fn gamma_laplace(nu: f64, t: f64, u: f64) -> f64 {
    if nu == 0.0 {
        return (-u * t).exp();
    }
    let x = nu * u;
    // The power form is exact on representable bases; the log form keeps
    // precision as the clock approaches its deterministic limit.
    if x.abs() < 1e-3 {
        (-t / nu * x.ln_1p()).exp()
    } else {
        (1.0 + x).powf(-t / nu)
    }
}

/// Law of the business clock `T_t`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SubordinatorLaw {
    /// `T_t ~ Gamma(shape t / nu, rate 1 / nu)`: mean `t`, variance `nu t`.
    Gamma {
        nu: f64,
    },
    /// `T_t = exp(X_t)` with `X_t ~ Gamma(shape t / nu, rate 1 / nu)`.
    ExpGamma {
        nu: f64,
    },
    Deterministic,
}

/// Relative change at which the exp-gamma quadrature stops doubling.
const QUADRATURE_TOL: f64 = 1e-9;
const QUADRATURE_MAX_PANELS: usize = 1 << 8;
const GL_ORDER: usize = 16;

impl SubordinatorLaw {
    fn check(&self) -> Result<()> {
        match self {
            Self::Gamma { nu } | Self::ExpGamma { nu } if !(*nu > 0.0) => {
                Err(invalid(format!("variance rate {nu} must be positive")))
            }
            _ => Ok(()),
        }
    }

    fn gamma_of(nu: f64, t: f64) -> Result<Gamma> {
        Gamma::new(t / nu, 1.0 / nu).map_err(|e| invalid(format!("gamma law: {e}")))
    }

    /// Mean and variance of `T_t`.
    pub fn moments(&self, t: f64) -> (f64, f64) {
        match *self {
            Self::Gamma { nu } => (t, nu * t),
            Self::Deterministic => (t, 0.0),
            Self::ExpGamma { nu } => {
                let k = t / nu;
                let m1 = (1.0 - nu).powf(-k);
                let m2 = (1.0 - 2.0 * nu).powf(-k);
                (m1, m2 - m1 * m1)
            }
        }
    }

    /// `E[g(X)]` for `X ~ Gamma(t / nu, 1 / nu)` by composite Gauss-Legendre on
    /// panels graded geometrically toward the origin, where the density may be
    /// singular, doubling subdivisions until the relative change in every
    /// component is below `QUADRATURE_TOL`.
    fn gamma_expectation(nu: f64, t: f64, dim: usize, g: impl Fn(f64, &mut [f64])) -> Result<Vec<f64>> {
        let law = Self::gamma_of(nu, t)?;
        let (k, b) = (t / nu, 1.0 / nu);
        let ln_norm = k * b.ln() - ln_gamma(k);
        let x_max = 2.0 * law.inverse_cdf(1.0 - 1e-15);
        // Mass below x_min is at most (b x_min)^k / Gamma(k + 1) < 1e-17.
        let x_min = ((-17.0 * std::f64::consts::LN_10 + ln_gamma(k + 1.0)) / k).exp() / b;
        let mut breaks = vec![x_max];
        while *breaks.last().expect("non-empty") > x_min {
            breaks.push(0.5 * breaks.last().expect("non-empty"));
        }
        breaks.reverse();
        let (x, w) = gauss_legendre(GL_ORDER);
        let mut buf = vec![0.0; dim];
        let integrate = |panels: usize, buf: &mut [f64]| -> Vec<f64> {
            let mut acc = vec![0.0; dim];
            for seg in breaks.windows(2) {
                let h = (seg[1] - seg[0]) / panels as f64;
                for p in 0..panels {
                    for (xi, wi) in x.iter().zip(&w) {
                        let xv = seg[0] + h * (p as f64 + 0.5 * (xi + 1.0));
                        let dens = (ln_norm + (k - 1.0) * xv.ln() - b * xv).exp();
                        g(xv, buf);
                        acc.iter_mut().zip(buf.iter()).for_each(|(a, v)| *a += 0.5 * h * wi * dens * v);
                    }
                }
            }
            acc
        };
        let mut panels = 1;
        let mut prev = integrate(panels, &mut buf);
        loop {
            panels *= 2;
            let next = integrate(panels, &mut buf);
            let scale = next.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
            let change = next.iter().zip(&prev).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale;
            if change < QUADRATURE_TOL {
                return Ok(next);
            }
            if panels >= QUADRATURE_MAX_PANELS {
                return Err(Error::NonConvergence(format!(
                    "exp-gamma quadrature relative change {change:.3e} after {panels} panels"
                )));
            }
            prev = next;
        }
    }
}

impl TimeChangeLaw for SubordinatorLaw {
    fn laplace(&self, t: f64, u: f64) -> f64 {
        match *self {
            Self::Gamma { nu } => gamma_laplace(nu, t, u),
            Self::Deterministic => (-u * t).exp(),
            Self::ExpGamma { nu } => {
                if t == 0.0 {
                    return (-u).exp();
                }
                Self::gamma_expectation(nu, t, 1, |x, out| out[0] = (-u * x.exp()).exp()).map_or(f64::NAN, |v| v[0])
            }
        }
    }

    fn quantile(&self, t: f64, p: f64) -> Result<f64> {
        self.check()?;
        match *self {
            Self::Deterministic => Ok(t),
            _ if t == 0.0 => Ok(if matches!(self, Self::ExpGamma { .. }) { 1.0 } else { 0.0 }),
            Self::Gamma { nu } => Ok(Self::gamma_of(nu, t)?.inverse_cdf(p)),
            Self::ExpGamma { nu } => Ok(Self::gamma_of(nu, t)?.inverse_cdf(p).exp()),
        }
    }

    fn poisson_weights(&self, t: f64, lambda: f64, n_max: usize) -> Result<Vec<f64>> {
        self.check()?;
        if !(lambda > 0.0) {
            return Err(invalid(format!("uniformization rate {lambda} must be positive")));
        }
        match *self {
            Self::Deterministic => CalendarClock.poisson_weights(t, lambda, n_max),
            Self::Gamma { .. } | Self::ExpGamma { .. } if t == 0.0 => {
                let t0 = if matches!(self, Self::ExpGamma { .. }) { 1.0 } else { 0.0 };
                CalendarClock.poisson_weights(t0, lambda, n_max)
            }
            Self::Gamma { nu } => {
                // Negative binomial: shape t / nu, success ratio lambda / (1 / nu + lambda).
                let k = t / nu;
                let b = 1.0 / nu;
                let (l0, l1) = ((b / (b + lambda)).ln(), (lambda / (b + lambda)).ln());
                let base = -ln_gamma(k);
                Ok((0..=n_max)
                    .map(|n| {
                        let n = n as f64;
                        (base + ln_gamma(n + k) - ln_gamma(n + 1.0) + k * l0 + n * l1).exp()
                    })
                    .collect())
            }
            Self::ExpGamma { nu } => Self::gamma_expectation(nu, t, n_max + 1, |x, out| {
                let lt = lambda * x.exp();
                let ln_lt = lt.ln();
                for (n, o) in out.iter_mut().enumerate() {
                    *o = (-lt + n as f64 * ln_lt - ln_gamma(n as f64 + 1.0)).exp();
                }
            }),
        }
    }
}

/// Nodes and weights of the `n`-point Gauss-Legendre rule on `[-1, 1]`.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::zeros(n, n);
    for k in 1..n {
        let b = k as f64 / ((4 * k * k - 1) as f64).sqrt();
        j[(k, k - 1)] = b;
        j[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> =
        (0..n).map(|k| (eig.eigenvalues[k], 2.0 * eig.eigenvectors[(0, k)].powi(2))).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// `theta a1 + a2`.
pub fn dilated_generator(split: &GeneratorSplit, theta: f64) -> Result<SparseGenerator> {
    if !(theta >= 0.0) {
        return Err(invalid(format!("dilaton {theta} must be non-negative")));
    }
    SparseGenerator::linear_combination(&[(theta, &split.a1), (1.0, &split.a2)])
}

/// Distribution at `t` given the dilaton value `theta`.
pub fn conditional_transient(
    p0: &[f64],
    split: &GeneratorSplit,
    theta: f64,
    law: &SubordinatorLaw,
    t: f64,
    eps: f64,
) -> Result<TransientDistribution> {
    let g = dilated_generator(split, theta)?;
    if g.max_exit_rate() == 0.0 {
        return time_changed_distribution(p0, &g, &CalendarClock, 0.0, eps).map(|mut d| {
            d.horizon = t;
            d
        });
    }
    time_changed_distribution(p0, &g, law, t, eps)
}

/// Mixture of conditional distributions over a dilaton marginal.
pub fn unconditional_transient(
    p0: &[f64],
    split: &GeneratorSplit,
    grid: &ThetaGrid,
    marginal: &[f64],
    law: &SubordinatorLaw,
    t: f64,
    eps: f64,
) -> Result<Vec<f64>> {
    check_probability(marginal, grid.len(), "dilaton marginal")?;
    let mut out = vec![0.0; p0.len()];
    for (&theta, &w) in grid.nodes.iter().zip(marginal) {
        if w == 0.0 {
            continue;
        }
        let d = conditional_transient(p0, split, theta, law, t, eps)?;
        out.iter_mut().zip(&d.probabilities).for_each(|(o, p)| *o += w * p);
    }
    Ok(out)
}

fn check_probability(p: &[f64], n: usize, what: &str) -> Result<()> {
    if p.len() != n {
        return Err(invalid(format!("{what} has {} entries for {n} nodes", p.len())));
    }
    let s: f64 = p.iter().sum();
    if p.iter().any(|v| !(*v >= 0.0)) || (s - 1.0).abs() > 1e-10 {
        return Err(invalid(format!("{what} must be non-negative and sum to 1 (sum = {s})")));
    }
    Ok(())
}

/// Correlation between `theta T` and `T` for independent unit-mean `theta`.
pub fn subordinator_correlation(var_t: f64, mean_t: f64, var_theta: f64) -> Result<f64> {
    if !(var_t >= 0.0 && var_theta >= 0.0) {
        return Err(invalid("variances must be non-negative"));
    }
    if var_t == 0.0 && var_theta == 0.0 {
        return Err(invalid("correlation undefined when both variances vanish"));
    }
    if var_theta.is_infinite() {
        return Ok(0.0);
    }
    Ok((var_t / (var_t + var_theta * (var_t + mean_t * mean_t))).sqrt())
}

/// Functionals `G_j(theta)` and targets `C_j` at one node. Row 0 is `G = theta`, `C = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodePanel {
    pub time: f64,
    pub g: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

impl NodePanel {
    pub fn rows(&self) -> usize {
        self.g.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintPanel {
    pub nodes: Vec<NodePanel>,
}

/// Expected deflated payoffs under the conditional distribution at each
/// dilaton node. `payoffs[i][j]` is the payoff vector of quote `j` at node `i`
/// and `targets[i][j]` its price.
pub fn constraint_panel(
    node_times: &[f64],
    payoffs: &[Vec<Vec<f64>>],
    targets: &[Vec<f64>],
    p0: &[f64],
    split: &GeneratorSplit,
    law: &SubordinatorLaw,
    grid: &ThetaGrid,
    eps: f64,
) -> Result<ConstraintPanel> {
    if node_times.is_empty() || node_times.len() != payoffs.len() || payoffs.len() != targets.len() {
        return Err(invalid("one payoff and target set per node is required"));
    }
    if !(node_times[0] > 0.0) || node_times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid("node times must be positive and strictly increasing"));
    }
    let mut nodes = Vec::with_capacity(node_times.len());
    for ((&t, pay), tgt) in node_times.iter().zip(payoffs).zip(targets) {
        if pay.len() != tgt.len() {
            return Err(invalid(format!("payoff and target counts differ at t = {t}")));
        }
        let dists: Vec<Vec<f64>> = grid
            .nodes
            .iter()
            .map(|&th| conditional_transient(p0, split, th, law, t, eps).map(|d| d.probabilities))
            .collect::<Result<_>>()?;
        let mut g = vec![grid.nodes.clone()];
        for v in pay {
            if v.len() != p0.len() || v.iter().any(|x| !x.is_finite()) {
                return Err(invalid(format!("payoff at t = {t} must be finite on every state")));
            }
            g.push(dists.iter().map(|d| d.iter().zip(v).map(|(p, x)| p * x).sum()).collect());
        }
        let mut c = vec![1.0];
        c.extend_from_slice(tgt);
        nodes.push(NodePanel { time: t, g, targets: c });
    }
    Ok(ConstraintPanel { nodes })
}

#[derive(Debug, Clone, Copy)]
pub struct DualOptions {
    /// Stop once `max_j |grad_j|` falls below this.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Slack allowed when a target sits on a feasibility bound.
    pub boundary_tol: f64,
}

impl Default for DualOptions {
    fn default() -> Self {
        Self { grad_tol: 1e-11, max_iter: 500, boundary_tol: 1e-10 }
    }
}

/// Tilted rows `p(. | r) ∝ q(. | r) exp(xi . G)` against a weighting of rows.
/// A single row with weight one is the first-period problem.
struct Dual<'a> {
    weights: &'a [f64],
    prior: &'a [Vec<f64>],
    g: &'a [Vec<f64>],
    targets: &'a [f64],
}

struct DualEval {
    value: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
    rows: Vec<Vec<f64>>,
}

impl Dual<'_> {
    fn dim(&self) -> usize {
        self.g.len()
    }

    fn eval(&self, xi: &[f64]) -> DualEval {
        let (m, n) = (self.dim(), self.g[0].len());
        let expo: Vec<f64> = (0..n).map(|k| (0..m).map(|j| xi[j] * self.g[j][k]).sum()).collect();
        let mut value = -xi.iter().zip(self.targets).map(|(x, c)| x * c).sum::<f64>();
        let mut grad = DVector::from_iterator(m, self.targets.iter().map(|c| -c));
        let mut hess = DMatrix::zeros(m, m);
        let mut rows = Vec::with_capacity(self.prior.len());
        for (w, q) in self.weights.iter().zip(self.prior) {
            let top = (0..n).filter(|&k| q[k] > 0.0).map(|k| expo[k]).fold(f64::NEG_INFINITY, f64::max);
            let mut p: Vec<f64> = (0..n).map(|k| if q[k] > 0.0 { q[k] * (expo[k] - top).exp() } else { 0.0 }).collect();
            let z: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= z);
            if *w > 0.0 {
                value += w * (z.ln() + top);
                let mean: Vec<f64> = (0..m).map(|j| (0..n).map(|k| p[k] * self.g[j][k]).sum()).collect();
                for j in 0..m {
                    grad[j] += w * mean[j];
                    for l in 0..=j {
                        let cov: f64 = (0..n).map(|k| p[k] * (self.g[j][k] - mean[j]) * (self.g[l][k] - mean[l])).sum();
                        hess[(j, l)] += w * cov;
                    }
                }
            }
            rows.push(p);
        }
        for j in 0..m {
            for l in 0..j {
                hess[(l, j)] = hess[(j, l)];
            }
        }
        DualEval { value, grad, hess, rows }
    }

    /// Per-row attainable range of `sum_r w_r E[G_j | r]` over the support.
    fn bounds(&self, j: usize) -> (f64, f64) {
        let mut lo = 0.0;
        let mut hi = 0.0;
        for (w, q) in self.weights.iter().zip(self.prior) {
            if *w == 0.0 {
                continue;
            }
            let vals = (0..q.len()).filter(|&k| q[k] > 0.0).map(|k| self.g[j][k]);
            let (a, b) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            lo += w * a;
            hi += w * b;
        }
        (lo, hi)
    }

    fn check_feasible(&self, tol: f64) -> Result<()> {
        for j in 0..self.dim() {
            let (lo, hi) = self.bounds(j);
            let c = self.targets[j];
            let slack = tol * (1.0 + c.abs());
            if c < lo - slack || c > hi + slack || (hi - lo <= slack && (c - lo).abs() > slack) {
                return Err(Error::Infeasible { row: j, target: c, lower: lo, upper: hi });
            }
        }
        Ok(())
    }

    /// Face reduction followed by Newton on the remaining rows. A target on a
    /// bound of its row confines every weighted prior row to the extremal
    /// nodes of that functional; its multiplier is infinite and reported as
    /// such. Rows left constant on the reduced support carry multiplier zero.
    fn solve(&self, opts: &DualOptions) -> Result<(Vec<f64>, DualEval, usize)> {
        self.check_feasible(opts.boundary_tol)?;
        let m = self.dim();
        let mut prior = self.prior.to_vec();
        let mut pinned: Vec<Option<f64>> = vec![None; m];
        loop {
            let reduced = Dual { weights: self.weights, prior: &prior, g: self.g, targets: self.targets };
            reduced.check_feasible(opts.boundary_tol)?;
            let mut changed = false;
            for j in 0..m {
                if pinned[j].is_some() {
                    continue;
                }
                let (lo, hi) = reduced.bounds(j);
                let c = self.targets[j];
                let slack = opts.boundary_tol * (1.0 + c.abs());
                let (mark, keep_low) = if hi - lo <= slack {
                    (0.0, None)
                } else if (c - lo).abs() <= slack {
                    (f64::NEG_INFINITY, Some(true))
                } else if (hi - c).abs() <= slack {
                    (f64::INFINITY, Some(false))
                } else {
                    continue;
                };
                if let Some(low) = keep_low {
                    let g = &self.g[j];
                    for (w, q) in self.weights.iter().zip(prior.iter_mut()) {
                        if *w == 0.0 {
                            continue;
                        }
                        let support = (0..q.len()).filter(|&k| q[k] > 0.0);
                        let ext = if low {
                            support.map(|k| g[k]).fold(f64::INFINITY, f64::min)
                        } else {
                            support.map(|k| g[k]).fold(f64::NEG_INFINITY, f64::max)
                        };
                        q.iter_mut().zip(g).for_each(|(v, x)| {
                            if *x != ext {
                                *v = 0.0;
                            }
                        });
                    }
                }
                pinned[j] = Some(mark);
                changed = true;
                break;
            }
            if !changed {
                break;
            }
        }
        let free: Vec<usize> = (0..m).filter(|&j| pinned[j].is_none()).collect();
        let g: Vec<Vec<f64>> = free.iter().map(|&j| self.g[j].clone()).collect();
        let targets: Vec<f64> = free.iter().map(|&j| self.targets[j]).collect();
        let (sub_xi, ev, it) = if free.is_empty() {
            let trivial = Dual { weights: self.weights, prior: &prior, g: &self.g[..1], targets: &self.targets[..1] };
            (Vec::new(), trivial.eval(&[0.0]), 0)
        } else {
            Dual { weights: self.weights, prior: &prior, g: &g, targets: &targets }.newton(opts)?
        };
        let mut xi: Vec<f64> = pinned.iter().map(|p| p.unwrap_or(0.0)).collect();
        free.iter().zip(sub_xi).for_each(|(&j, v)| xi[j] = v);
        Ok((xi, ev, it))
    }

    /// Damped Newton on the convex potential with backtracking.
    fn newton(&self, opts: &DualOptions) -> Result<(Vec<f64>, DualEval, usize)> {
        let m = self.dim();
        let mut xi = vec![0.0; m];
        let mut cur = self.eval(&xi);
        for it in 0..opts.max_iter {
            if cur.grad.amax() < opts.grad_tol {
                return Ok((xi, cur, it));
            }
            let scale = cur.hess.diagonal().amax().max(1e-300);
            let mut ridge = 1e-14 * scale;
            let step = loop {
                let h = &cur.hess + DMatrix::identity(m, m) * ridge;
                if let Some(ch) = h.cholesky() {
                    break ch.solve(&(-&cur.grad));
                }
                ridge = (ridge * 100.0).max(1e-300);
                if ridge > 1e300 {
                    return Err(Error::NonConvergence("dual Hessian cannot be regularised".into()));
                }
            };
            let slope = cur.grad.dot(&step);
            let mut a = 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                let trial: Vec<f64> = xi.iter().zip(step.iter()).map(|(x, d)| x + a * d).collect();
                let ev = self.eval(&trial);
                if ev.value.is_finite() && ev.value <= cur.value + 1e-4 * a * slope {
                    accepted = Some((trial, ev));
                    break;
                }
                a *= 0.5;
            }
            match accepted {
                Some((x, ev)) => {
                    xi = x;
                    cur = ev;
                }
                None => {
                    // Line search exhausted: the potential is flat to rounding.
                    if cur.grad.amax() < 1e3 * opts.grad_tol {
                        return Ok((xi, cur, it));
                    }
                    return Err(Error::NonConvergence(format!(
                        "dual line search stalled with max |gradient| {:.3e}",
                        cur.grad.amax()
                    )));
                }
            }
        }
        if cur.grad.amax() < opts.grad_tol {
            return Ok((xi, cur, opts.max_iter));
        }
        Err(Error::NonConvergence(format!(
            "dual did not converge in {} iterations, max |gradient| {:.3e}",
            opts.max_iter,
            cur.grad.amax()
        )))
    }
}

/// Dual potential, gradient and Hessian of the conditional step at `xi`.
pub fn conditional_dual(
    p_prev: &[f64],
    prior_kernel: &[Vec<f64>],
    panel: &NodePanel,
    xi: &[f64],
) -> (f64, Vec<f64>, DMatrix<f64>) {
    let d = Dual { weights: p_prev, prior: prior_kernel, g: &panel.g, targets: &panel.targets };
    let e = d.eval(xi);
    (e.value, e.grad.iter().copied().collect(), e.hess)
}

/// Tilted first-period marginal `p ∝ q exp(xi . G)` meeting the node's targets.
pub fn mce_first_period(prior: &[f64], panel: &NodePanel, opts: &DualOptions) -> Result<(Vec<f64>, Vec<f64>)> {
    check_panel(panel, prior.len())?;
    if prior.iter().any(|v| !(*v > 0.0)) {
        return Err(invalid("first-period prior must be strictly positive"));
    }
    let q = vec![prior.to_vec()];
    let d = Dual { weights: &[1.0], prior: &q, g: &panel.g, targets: &panel.targets };
    let (xi, ev, _) = d.solve(opts)?;
    Ok((ev.rows.into_iter().next().expect("one row"), xi))
}

/// Tilted kernel `p(t2 | t1) ∝ q(t2 | t1) exp(xi . G(t2))` meeting the node's
/// targets under `p_prev`.
pub fn mce_conditional_step(
    p_prev: &[f64],
    prior_kernel: &[Vec<f64>],
    panel: &NodePanel,
    opts: &DualOptions,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let n = p_prev.len();
    check_panel(panel, n)?;
    check_kernel(prior_kernel, n)?;
    let d = Dual { weights: p_prev, prior: prior_kernel, g: &panel.g, targets: &panel.targets };
    let (xi, ev, _) = d.solve(opts)?;
    Ok((ev.rows, xi))
}

fn check_panel(panel: &NodePanel, n: usize) -> Result<()> {
    if panel.g.is_empty() || panel.g.len() != panel.targets.len() {
        return Err(invalid("panel needs one target per functional"));
    }
    if panel.g.iter().any(|r| r.len() != n || r.iter().any(|v| !v.is_finite())) {
        return Err(invalid("panel functionals must be finite on every dilaton node"));
    }
    Ok(())
}

fn check_kernel(k: &[Vec<f64>], n: usize) -> Result<()> {
    if k.len() != n {
        return Err(invalid("kernel needs one row per dilaton node"));
    }
    for (r, row) in k.iter().enumerate() {
        if row.len() != n || row[..r].iter().any(|v| *v != 0.0) || row[r..].iter().any(|v| !(*v > 0.0)) {
            return Err(invalid(format!("prior kernel row {r} must be positive on and only on t2 >= t1")));
        }
    }
    Ok(())
}

/// Cell probabilities of a distribution on the grid: node `k` collects the mass
/// between the midpoints around it, the end nodes collect the tails.
fn discretize(nodes: &[f64], from: usize, cdf: impl Fn(f64) -> f64) -> Vec<f64> {
    let n = nodes.len();
    let mut p = vec![0.0; n];
    let mut prev = 0.0;
    for k in from..n {
        let upper = if k + 1 == n { 1.0 } else { cdf(0.5 * (nodes[k] + nodes[k + 1])) };
        p[k] = (upper - prev).max(0.0);
        prev = upper;
    }
    p
}

/// Discretized gamma law with mean 1 and variance `var`, floored to stay positive.
pub fn gamma_prior(grid: &ThetaGrid, var: f64) -> Result<Vec<f64>> {
    if !(var > 0.0) {
        return Err(invalid("prior variance must be positive"));
    }
    let law = Gamma::new(1.0 / var, 1.0 / var).map_err(|e| invalid(format!("gamma prior: {e}")))?;
    let p = discretize(&grid.nodes, 0, |x| law.cdf(x));
    Ok(positive_normalized(p, 0))
}

/// Kernel of `theta_1 + D` with `D ~ Gamma(dt / nu, rate 1 / (nu drift))`:
/// mean `drift dt`, variance `nu drift^2 dt`. Zero below the diagonal.
pub fn gamma_increment_kernel(grid: &ThetaGrid, drift: f64, nu: f64, dt: f64) -> Result<Vec<Vec<f64>>> {
    if !(drift > 0.0 && nu > 0.0 && dt > 0.0) {
        return Err(invalid("increment kernel needs positive drift, nu and dt"));
    }
    let law = Gamma::new(dt / nu, 1.0 / (nu * drift)).map_err(|e| invalid(format!("gamma kernel: {e}")))?;
    let nodes = &grid.nodes;
    Ok((0..nodes.len())
        .map(|r| {
            let p = discretize(nodes, r, |x| law.cdf((x - nodes[r]).max(0.0)));
            positive_normalized(p, r)
        })
        .collect())
}

const PRIOR_FLOOR: f64 = 1e-300;

fn positive_normalized(mut p: Vec<f64>, from: usize) -> Vec<f64> {
    p[from..].iter_mut().for_each(|v| *v = v.max(PRIOR_FLOOR));
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

/// Calibrated dilaton law on the node timeline.
#[derive(Debug, Clone, PartialEq)]
pub struct DilatonLaw {
    pub theta_grid: ThetaGrid,
    pub node_times: Vec<f64>,
    pub marginals: Vec<Vec<f64>>,
    /// `kernels[k]` maps node `k` to node `k + 1`.
    pub kernels: Vec<Vec<Vec<f64>>>,
    pub multipliers: Vec<Vec<f64>>,
}

impl DilatonLaw {
    /// Marginal at the latest node at or before `t`; the first node before it.
    pub fn marginal_at(&self, t: f64) -> &[f64] {
        let k = self.node_times.partition_point(|&x| x <= t);
        &self.marginals[k.saturating_sub(1)]
    }

    pub fn mean(&self, k: usize) -> f64 {
        self.marginals[k].iter().zip(&self.theta_grid.nodes).map(|(p, t)| p * t).sum()
    }

    /// Normalisation, unit mean, row-stochastic kernels with no mass below the diagonal.
    pub fn check(&self, tol: f64) -> Result<()> {
        for (k, m) in self.marginals.iter().enumerate() {
            if (m.iter().sum::<f64>() - 1.0).abs() > tol || m.iter().any(|v| *v < 0.0) {
                return Err(invalid(format!("marginal {k} is not a probability vector")));
            }
            if (self.mean(k) - 1.0).abs() > 1e-8 {
                return Err(invalid(format!("marginal {k} has mean {} != 1", self.mean(k))));
            }
        }
        for (k, ker) in self.kernels.iter().enumerate() {
            for (r, row) in ker.iter().enumerate() {
                if (row.iter().sum::<f64>() - 1.0).abs() > tol || row.iter().any(|v| *v < 0.0) {
                    return Err(invalid(format!("kernel {k} row {r} is not stochastic")));
                }
                if row[..r].iter().any(|v| *v != 0.0) {
                    return Err(invalid(format!("kernel {k} row {r} has mass below the diagonal")));
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let row = |v: &[f64]| v.iter().map(|x| format!("{x:.14e}")).collect::<Vec<_>>().join(",");
        writeln!(s, "[theta_grid]\n{}", row(&self.theta_grid.nodes)).ok();
        writeln!(s, "\n[marginals]\nnode_time,probabilities").ok();
        for (t, m) in self.node_times.iter().zip(&self.marginals) {
            writeln!(s, "{t:.14e},{}", row(m)).ok();
        }
        for (k, ker) in self.kernels.iter().enumerate() {
            writeln!(s, "\n[kernel {k}]").ok();
            for r in ker {
                writeln!(s, "{}", row(r)).ok();
            }
        }
        writeln!(s, "\n[multipliers]\nnode_time,xi").ok();
        for (t, x) in self.node_times.iter().zip(&self.multipliers) {
            writeln!(s, "{t:.14e},{}", row(x)).ok();
        }
        s
    }
}

/// Calibration outcome: the law over the nodes that succeeded and the first failure.
#[derive(Debug)]
pub struct DilatonCalibration {
    pub law: DilatonLaw,
    pub failure: Option<(usize, Error)>,
}

/// Node 1 by a tilted marginal, later nodes by tilted kernels, marginals
/// propagated through each kernel. `priors[k]` is the prior kernel into node `k + 1`.
pub fn implied_dilaton_process(
    panel: &ConstraintPanel,
    grid: &ThetaGrid,
    first_prior: &[f64],
    priors: &[Vec<Vec<f64>>],
    opts: &DualOptions,
) -> Result<DilatonCalibration> {
    let n_nodes = panel.nodes.len();
    if priors.len() + 1 < n_nodes {
        return Err(invalid("one prior kernel per node after the first is required"));
    }
    let mut law = DilatonLaw {
        theta_grid: grid.clone(),
        node_times: Vec::new(),
        marginals: Vec::new(),
        kernels: Vec::new(),
        multipliers: Vec::new(),
    };
    let (p1, xi1) = match mce_first_period(first_prior, &panel.nodes[0], opts) {
        Ok(v) => v,
        Err(e) => return Ok(DilatonCalibration { law, failure: Some((0, e)) }),
    };
    law.node_times.push(panel.nodes[0].time);
    law.marginals.push(p1);
    law.multipliers.push(xi1);
    for k in 1..n_nodes {
        let prev = law.marginals[k - 1].clone();
        let (kernel, xi) = match mce_conditional_step(&prev, &priors[k - 1], &panel.nodes[k], opts) {
            Ok(v) => v,
            Err(e) => return Ok(DilatonCalibration { law, failure: Some((k, e)) }),
        };
        let n = prev.len();
        let next: Vec<f64> = (0..n).map(|c| (0..n).map(|r| prev[r] * kernel[r][c]).sum()).collect();
        law.node_times.push(panel.nodes[k].time);
        law.marginals.push(next);
        law.kernels.push(kernel);
        law.multipliers.push(xi);
    }
    Ok(DilatonCalibration { law, failure: None })
}

/// Model prices `sum_theta p_k(theta) G_kj(theta)` for every node and quote row.
pub fn reprice(panel: &ConstraintPanel, law: &DilatonLaw) -> Vec<Vec<f64>> {
    panel
        .nodes
        .iter()
        .zip(&law.marginals)
        .map(|(node, p)| node.g.iter().map(|g| g.iter().zip(p).map(|(a, b)| a * b).sum()).collect())
        .collect()
}
