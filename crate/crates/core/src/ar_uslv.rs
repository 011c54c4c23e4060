//! Activity-rate stochastic local volatility on the folded `(Z, Y)` chain.
//!
//! Joint states are `(i, alpha)` with `i` a driver node and `alpha` a pair of
//! activity levels, flattened as `i * M + alpha` where `M` is the number of
//! activity pairs. The joint generator is
//!
//! `A[i a | j b] = d_ij Qhat[a b] + (1 - d_ij) Qtilde^(j - i)[a b] Ahat^a[i j] + d_ab Ahat^a[i j]`
//!
//! so that summing over `b` returns `Ahat^a[i j]`. Forward induction picks the
//! multipliers in `Ahat^a[i j] = q_ij A^a[i j]` so that the driver marginal
//! follows the calibrated local-volatility generator.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{invalid, Error, Result};
use crate::grids::YGrid;
use crate::lv_calibration::{LvModel, LvSpace};
use crate::markov_generator::{split_generator, ROW_SUM_TOL};
use crate::sparse::{SparseGenerator, Structure};
use crate::transient_probability::transient_distribution;

/// Bivariate Ornstein-Uhlenbeck dynamics of `ln Y`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OuParams {
    pub k: [f64; 2],
    /// Long-run levels of `ln Y`.
    pub eta: [f64; 2],
    pub nu: [f64; 2],
    pub rho_y: f64,
}

impl OuParams {
    fn check(&self) -> Result<()> {
        if self.k.iter().chain(&self.nu).any(|v| !(*v >= 0.0)) || !(self.rho_y.abs() < 1.0) {
            return Err(invalid("OU speeds and vols must be non-negative and |rho_y| < 1"));
        }
        Ok(())
    }
}

/// Signed codependence strengths and off-diagonal decay of the jump kernels.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct JumpCouplingParams {
    pub gamma: [f64; 2],
    pub q: [f64; 2],
}

fn log_step(g: &YGrid) -> Result<f64> {
    if g.levels.iter().any(|y| !(*y > 0.0)) {
        return Err(invalid("activity levels must be positive"));
    }
    if g.len() < 2 {
        return Ok(1.0);
    }
    let h = g.log_step();
    let uniform = g.levels.windows(2).all(|w| ((w[1] / w[0]).ln() - h).abs() <= 1e-10 * h.abs());
    if !(h > 0.0) || !uniform {
        return Err(invalid("activity grid must be increasing and log-uniform"));
    }
    Ok(h)
}

/// Generator of the activity pair on the product of two log-uniform grids.
/// Drift is upwinded, second derivatives are central and the cross term uses
/// the seven-point stencil aligned with the sign of `rho_y`.
pub fn y_idiosyncratic_generator(ou: &OuParams, grids: [&YGrid; 2]) -> Result<SparseGenerator> {
    ou.check()?;
    let (h1, h2) = (log_step(grids[0])?, log_step(grids[1])?);
    let (n1, n2) = (grids[0].len(), grids[1].len());
    let (v1, v2) = (ou.nu[0] * ou.nu[0] / (h1 * h1), ou.nu[1] * ou.nu[1] / (h2 * h2));
    let r = if n1 > 1 && n2 > 1 { ou.rho_y.abs() * ou.nu[0] * ou.nu[1] / (h1 * h2) } else { 0.0 };
    let (e1, e2) = (0.5 * (v1 - r), 0.5 * (v2 - r));
    if e1 < -1e-12 * v1 || e2 < -1e-12 * v2 {
        return Err(Error::Admissibility(format!(
            "activity steps ({h1}, {h2}) give negative rates for rho_y = {}",
            ou.rho_y
        )));
    }
    let (e1, e2) = (e1.max(0.0), e2.max(0.0));
    let corner: isize = if ou.rho_y >= 0.0 { 1 } else { -1 };
    let mut trip = Vec::new();
    for a1 in 0..n1 {
        for a2 in 0..n2 {
            let row = a1 * n2 + a2;
            let d1 = ou.k[0] * (ou.eta[0] - grids[0].levels[a1].ln()) / h1;
            let d2 = ou.k[1] * (ou.eta[1] - grids[1].levels[a2].ln()) / h2;
            let moves = [
                (1, 0, e1 + d1.max(0.0)),
                (-1, 0, e1 + (-d1).max(0.0)),
                (0, 1, e2 + d2.max(0.0)),
                (0, -1, e2 + (-d2).max(0.0)),
                (1, corner, 0.5 * r),
                (-1, -corner, 0.5 * r),
            ];
            let mut out = 0.0;
            for (da, db, rate) in moves {
                let (t1, t2) = (a1 as isize + da, a2 as isize + db);
                if rate == 0.0 || t1 < 0 || t2 < 0 || t1 as usize >= n1 || t2 as usize >= n2 {
                    continue;
                }
                trip.push((row, t1 as usize * n2 + t2 as usize, rate));
                out += rate;
            }
            trip.push((row, row, -out));
        }
    }
    SparseGenerator::from_triplets(n1 * n2, trip, Structure::BlockTridiagonal { level_size: n2 })
}

/// Triangular decay generators `(A+, A-)` on `n` levels with `A+[a b] = q^(b - a - 1)` for `b > a`.
pub fn decay_generators(n: usize, q: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(invalid(format!("decay rate {q} outside (0, 1]")));
    }
    let mut up = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in a + 1..n {
            up[(a, b)] = q.powi((b - a - 1) as i32);
        }
        up[(a, a)] = -up.row(a).sum();
    }
    let mut down = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in 0..a {
            down[(a, b)] = q.powi((a - b - 1) as i32);
        }
        down[(a, a)] = -down.row(a).sum();
    }
    Ok((up, down))
}

/// `K1 (x) K2 - I` for the driver move `m`, with `K = I + (gamma m)+ A+ + (gamma m)- A-`.
/// Every entry of `K1 (x) K2` must lie in `[0, 1]`.
pub fn joint_jump_kernel(jp: &JumpCouplingParams, sizes: [usize; 2], m: (i32, i32)) -> Result<DMatrix<f64>> {
    if m == (0, 0) {
        return Err(invalid("joint jumps need a driver move"));
    }
    let mut factors = Vec::with_capacity(2);
    for (f, mi) in [m.0, m.1].into_iter().enumerate() {
        let (up, down) = decay_generators(sizes[f], jp.q[f])?;
        let x = jp.gamma[f] * mi as f64;
        factors.push(DMatrix::identity(sizes[f], sizes[f]) + up * x.max(0.0) + down * (-x).max(0.0));
    }
    let k = factors[0].kronecker(&factors[1]);
    if let Some(v) = k.iter().find(|v| !(**v >= -1e-15 && **v <= 1.0 + 1e-15)) {
        return Err(Error::Admissibility(format!("jump kernel entry {v} outside [0, 1] for move {m:?}")));
    }
    let n = k.nrows();
    Ok(k - DMatrix::identity(n, n))
}

/// The eight kernels for `|m1|, |m2| <= 1`, row-major, indexed by `3 (m1 + 1) + (m2 + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpKernels {
    pub size: usize,
    kernels: Vec<Vec<f64>>,
}

impl JumpKernels {
    pub fn build(jp: &JumpCouplingParams, sizes: [usize; 2]) -> Result<Self> {
        let n = sizes[0] * sizes[1];
        let mut kernels = vec![vec![0.0; n * n]; 9];
        for m1 in -1..=1 {
            for m2 in -1..=1 {
                if (m1, m2) == (0, 0) {
                    continue;
                }
                let k = joint_jump_kernel(jp, sizes, (m1, m2))?;
                let dst = &mut kernels[move_slot(m1, m2)];
                for a in 0..n {
                    for b in 0..n {
                        dst[a * n + b] = k[(a, b)];
                    }
                }
            }
        }
        Ok(Self { size: n, kernels })
    }

    pub fn zero(size: usize) -> Self {
        Self { size, kernels: vec![vec![0.0; size * size]; 9] }
    }

    pub fn kernel(&self, m1: i32, m2: i32) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.size, self.size, &self.kernels[move_slot(m1, m2)])
    }

    fn slot(&self, s: usize) -> &[f64] {
        &self.kernels[s]
    }
}

fn move_slot(m1: i32, m2: i32) -> usize {
    (3 * (m1 + 1) + (m2 + 1)) as usize
}

/// Activity model: grids, initial levels and the two Y-side generators.
#[derive(Debug, Clone, PartialEq)]
pub struct ArComponents {
    pub y_grids: [YGrid; 2],
    /// Initial level index per factor.
    pub y0: [usize; 2],
    pub q_hat: SparseGenerator,
    pub kernels: JumpKernels,
}

impl ArComponents {
    pub fn build(ou: &OuParams, jumps: &JumpCouplingParams, y_grids: [YGrid; 2], y0: [usize; 2]) -> Result<Self> {
        let q_hat = y_idiosyncratic_generator(ou, [&y_grids[0], &y_grids[1]])?;
        let kernels = JumpKernels::build(jumps, [y_grids[0].len(), y_grids[1].len()])?;
        Self::new(y_grids, y0, q_hat, kernels)
    }

    pub fn new(y_grids: [YGrid; 2], y0: [usize; 2], q_hat: SparseGenerator, kernels: JumpKernels) -> Result<Self> {
        let m = y_grids[0].len() * y_grids[1].len();
        if y0[0] >= y_grids[0].len() || y0[1] >= y_grids[1].len() {
            return Err(invalid("initial activity level outside the grid"));
        }
        if q_hat.dim() != m || kernels.size != m {
            return Err(invalid("activity generators do not match the activity grids"));
        }
        q_hat.ensure_valid(ROW_SUM_TOL)?;
        Ok(Self { y_grids, y0, q_hat, kernels })
    }

    pub fn n_alpha(&self) -> usize {
        self.y_grids[0].len() * self.y_grids[1].len()
    }

    pub fn activities(&self, alpha: usize) -> (f64, f64) {
        let n2 = self.y_grids[1].len();
        (self.y_grids[0].levels[alpha / n2], self.y_grids[1].levels[alpha % n2])
    }

    pub fn initial_alpha(&self) -> usize {
        self.y0[0] * self.y_grids[1].len() + self.y0[1]
    }

    /// Prior conditional generators `y1 a1 + y2 a2` on the pattern of `a_1d`.
    pub fn conditional_generators(&self, a_1d: &SparseGenerator) -> Result<Vec<SparseGenerator>> {
        let split = split_generator(a_1d)?;
        (0..self.n_alpha())
            .map(|al| {
                let (y1, y2) = self.activities(al);
                SparseGenerator::linear_combination(&[(y1, &split.a1), (y2, &split.a2)])
            })
            .collect()
    }
}

/// Driver generator, prior conditionals and activity generators of one
/// time interval, shared by every step in it.
#[derive(Debug)]
pub struct JointBase {
    a_1d: SparseGenerator,
    level_size: usize,
    /// Off-diagonal prior rates per activity pair, aligned with the CSR slots of `a_1d`.
    cond: Vec<Vec<f64>>,
    /// Kernel slot per CSR position; `usize::MAX` on the diagonal.
    slots: Vec<usize>,
    q_hat: SparseGenerator,
    kernels: JumpKernels,
}

impl JointBase {
    /// `level_size` decodes driver indices as `i = i1 * level_size + i2`.
    pub fn new(
        a_1d: SparseGenerator,
        level_size: usize,
        cond: &[SparseGenerator],
        q_hat: SparseGenerator,
        kernels: JumpKernels,
    ) -> Result<Self> {
        let n = a_1d.dim();
        if cond.len() != q_hat.dim() || kernels.size != q_hat.dim() {
            return Err(invalid("conditional generators, Q_hat and kernels disagree on the activity count"));
        }
        if level_size == 0 || !n.is_multiple_of(level_size) {
            return Err(invalid("level size does not divide the driver state count"));
        }
        let mut slots = vec![usize::MAX; a_1d.stored()];
        for i in 0..n {
            for p in a_1d.row_range(i) {
                let j = a_1d.cols()[p];
                if j == i {
                    continue;
                }
                let m1 = (j / level_size) as i64 - (i / level_size) as i64;
                let m2 = (j % level_size) as i64 - (i % level_size) as i64;
                if m1.abs() > 1 || m2.abs() > 1 {
                    return Err(invalid(format!("driver move ({m1}, {m2}) from {i} to {j} exceeds one node")));
                }
                slots[p] = move_slot(m1 as i32, m2 as i32);
            }
        }
        let mut vals = Vec::with_capacity(cond.len());
        for (al, g) in cond.iter().enumerate() {
            if g.dim() != n {
                return Err(invalid(format!("conditional generator {al} has the wrong size")));
            }
            g.ensure_valid(ROW_SUM_TOL)?;
            let mut v = vec![0.0; a_1d.stored()];
            let mut covered = 0;
            for i in 0..n {
                for p in a_1d.row_range(i) {
                    let j = a_1d.cols()[p];
                    if j != i {
                        v[p] = g.get(i, j);
                        if v[p] != 0.0 {
                            covered += 1;
                        }
                    }
                }
            }
            let total = g.triplets().filter(|(i, j, v)| i != j && *v != 0.0).count();
            if covered != total {
                return Err(invalid(format!("conditional generator {al} has moves outside the driver pattern")));
            }
            vals.push(v);
        }
        Ok(Self { a_1d, level_size, cond: vals, slots, q_hat, kernels })
    }

    pub fn n_z(&self) -> usize {
        self.a_1d.dim()
    }

    pub fn n_alpha(&self) -> usize {
        self.cond.len()
    }

    pub fn a_1d(&self) -> &SparseGenerator {
        &self.a_1d
    }

    /// Driver marginal `sum_a pi(i, a)`.
    pub fn marginal(&self, pi: &[f64]) -> Vec<f64> {
        pi.chunks(self.n_alpha()).map(|c| c.iter().sum()).collect()
    }

    /// Multipliers making the driver marginal of `pi A` equal to `m A_1d`:
    /// `q_ij = A_ij m(i) / sum_a A^a_ij pi(i, a)`. Sources without mass get 1.
    pub fn bjn_adjustments(&self, pi: &[f64], time: f64) -> Result<Vec<f64>> {
        let na = self.n_alpha();
        let mut q = vec![1.0; self.a_1d.stored()];
        for i in 0..self.n_z() {
            let row = &pi[i * na..(i + 1) * na];
            let m: f64 = row.iter().sum();
            for p in self.a_1d.row_range(i) {
                let j = self.a_1d.cols()[p];
                let num = self.a_1d.values()[p] * m;
                if j == i || m == 0.0 || num == 0.0 {
                    continue;
                }
                let den: f64 = (0..na).map(|a| self.cond[a][p] * row[a]).sum();
                if den == 0.0 {
                    return Err(Error::CalibrationBreak { time, from: i, to: j });
                }
                q[p] = num / den;
            }
        }
        Ok(q)
    }
}

/// Joint generator for one set of multipliers, applied without assembly.
#[derive(Debug, Clone)]
pub struct JointGenerator {
    base: Arc<JointBase>,
    q: Vec<f64>,
}

impl JointGenerator {
    pub fn new(base: Arc<JointBase>, q: Vec<f64>) -> Result<Self> {
        if q.len() != base.a_1d.stored() {
            return Err(invalid("multiplier vector does not match the driver pattern"));
        }
        if let Some(v) = q.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(invalid(format!("multiplier {v} must be finite and non-negative")));
        }
        Ok(Self { base, q })
    }

    pub fn dim(&self) -> usize {
        self.base.n_z() * self.base.n_alpha()
    }

    fn rate(&self, a: usize, p: usize) -> f64 {
        self.q[p] * self.base.cond[a][p]
    }

    /// Diagonal of `Ahat^a` at driver state `i`.
    fn ahat_diag(&self, a: usize, i: usize) -> f64 {
        let cols = self.base.a_1d.cols();
        -self.base.a_1d.row_range(i).filter(|&p| cols[p] != i).map(|p| self.rate(a, p)).sum::<f64>()
    }

    pub fn max_exit_rate(&self) -> f64 {
        let na = self.base.n_alpha();
        let mut m = 0.0f64;
        for i in 0..self.base.n_z() {
            for a in 0..na {
                m = m.max((self.base.q_hat.diag(a) + self.ahat_diag(a, i)).abs());
            }
        }
        m
    }

    /// `pi A` for a row vector over joint states.
    pub fn left_mul(&self, pi: &[f64]) -> Vec<f64> {
        let b = &*self.base;
        let na = b.n_alpha();
        let cols = b.a_1d.cols();
        let mut out = vec![0.0; pi.len()];
        let mut w = vec![0.0; na];
        for i in 0..b.n_z() {
            let src = &pi[i * na..(i + 1) * na];
            let mut tmp = vec![0.0; na];
            b.q_hat.left_mul_into(src, &mut tmp);
            for a in 0..na {
                out[i * na + a] += tmp[a] + src[a] * self.ahat_diag(a, i);
            }
            for p in b.a_1d.row_range(i) {
                let j = cols[p];
                if j == i {
                    continue;
                }
                for a in 0..na {
                    w[a] = src[a] * self.rate(a, p);
                }
                let k = b.kernels.slot(b.slots[p]);
                let dst = &mut out[j * na..(j + 1) * na];
                for a in 0..na {
                    dst[a] += w[a];
                    if w[a] != 0.0 {
                        let row = &k[a * na..(a + 1) * na];
                        dst.iter_mut().zip(row).for_each(|(d, kv)| *d += w[a] * kv);
                    }
                }
            }
        }
        out
    }

    /// `A v` for a column vector over joint states.
    pub fn right_mul(&self, v: &[f64]) -> Vec<f64> {
        let b = &*self.base;
        let na = b.n_alpha();
        let cols = b.a_1d.cols();
        let mut out = vec![0.0; v.len()];
        for i in 0..b.n_z() {
            let own = &v[i * na..(i + 1) * na];
            let mut tmp = vec![0.0; na];
            b.q_hat.right_mul_into(own, &mut tmp);
            for a in 0..na {
                out[i * na + a] = tmp[a] + self.ahat_diag(a, i) * own[a];
            }
            for p in b.a_1d.row_range(i) {
                let j = cols[p];
                if j == i {
                    continue;
                }
                let k = b.kernels.slot(b.slots[p]);
                let tgt = &v[j * na..(j + 1) * na];
                for a in 0..na {
                    let row = &k[a * na..(a + 1) * na];
                    let jump: f64 = row.iter().zip(tgt).map(|(x, y)| x * y).sum();
                    out[i * na + a] += self.rate(a, p) * (tgt[a] + jump);
                }
            }
        }
        out
    }

    /// Assembled sparse form.
    pub fn to_sparse(&self) -> Result<SparseGenerator> {
        let b = &*self.base;
        let na = b.n_alpha();
        let ahat: Vec<SparseGenerator> = (0..na)
            .map(|a| {
                let mut trip = Vec::new();
                for i in 0..b.n_z() {
                    for p in b.a_1d.row_range(i) {
                        let j = b.a_1d.cols()[p];
                        if j != i {
                            trip.push((i, j, self.rate(a, p)));
                        }
                    }
                    trip.push((i, i, self.ahat_diag(a, i)));
                }
                SparseGenerator::from_triplets(b.n_z(), trip, b.a_1d.structure())
            })
            .collect::<Result<_>>()?;
        let level = b.level_size;
        let kernel_of = |i: usize, j: usize| {
            let m1 = (j / level) as i32 - (i / level) as i32;
            let m2 = (j % level) as i32 - (i % level) as i32;
            b.kernels.kernel(m1, m2)
        };
        assemble_full_generator(&ahat, &b.q_hat, kernel_of)
    }
}

/// `A[i a | j b] = d_ij Qhat[a b] + (1 - d_ij) Qtilde^(j-i)[a b] Ahat^a[i j] + d_ab Ahat^a[i j]`,
/// flattened as `i * M + a`. `kernel(i, j)` returns the pseudo-kernel for the move `i -> j`.
pub fn assemble_full_generator(
    ahat: &[SparseGenerator],
    q_hat: &SparseGenerator,
    kernel: impl Fn(usize, usize) -> DMatrix<f64>,
) -> Result<SparseGenerator> {
    let na = q_hat.dim();
    if ahat.len() != na || na == 0 {
        return Err(invalid("one conditional generator per activity pair is required"));
    }
    q_hat.ensure_valid(ROW_SUM_TOL)?;
    for g in ahat {
        g.ensure_valid(ROW_SUM_TOL)?;
    }
    let nz = ahat[0].dim();
    let mut trip = Vec::new();
    for i in 0..nz {
        for a in 0..na {
            let row = i * na + a;
            for (b, v) in q_hat.row(a).0.iter().zip(q_hat.row(a).1) {
                trip.push((row, i * na + b, *v));
            }
            let (cols, vals) = ahat[a].row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                trip.push((row, j * na + a, v));
                if j != i && v != 0.0 {
                    let k = kernel(i, j);
                    for b in 0..na {
                        if k[(a, b)] != 0.0 {
                            trip.push((row, j * na + b, k[(a, b)] * v));
                        }
                    }
                }
            }
        }
    }
    SparseGenerator::from_triplets(nz * na, trip, Structure::General)
}

/// Explicit Euler step `pi (I + dt A)`, rejected unless `dt max|diag| <= 0.5`.
pub fn forward_step(pi: &[f64], a: &JointGenerator, dt: f64) -> Result<Vec<f64>> {
    if pi.len() != a.dim() {
        return Err(invalid("joint distribution has the wrong length"));
    }
    let rate = a.max_exit_rate();
    if dt * rate > 0.5 {
        return Err(Error::Stability { dt, required_dt: 0.5 / rate });
    }
    if dt == 0.0 {
        return Ok(pi.to_vec());
    }
    let d = a.left_mul(pi);
    Ok(pi.iter().zip(&d).map(|(p, x)| p + dt * x).collect())
}

/// Backward counterpart of [`forward_step`]: `(I + dt A) v`.
pub fn backward_step(v: &[f64], a: &JointGenerator, dt: f64) -> Vec<f64> {
    let d = a.right_mul(v);
    v.iter().zip(&d).map(|(x, y)| x + dt * y).collect()
}

/// Multipliers of one time step: one set per stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ArStep {
    pub t0: f64,
    pub dt: f64,
    pub interval: usize,
    pub q: [Vec<f64>; 2],
}

/// Per-step calibration diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub time: f64,
    /// `max |marginal - reference|` against the exact local-volatility marginal.
    pub marginal_gap: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub mass_defect: f64,
}

/// Calibrated multipliers for every step, with the joint law at the horizon.
#[derive(Debug, Clone)]
pub struct ArCalibration {
    pub bases: Vec<Arc<JointBase>>,
    pub steps: Vec<ArStep>,
    pub initial: Vec<f64>,
    pub final_joint: Vec<f64>,
    /// Exact local-volatility driver marginal at the horizon.
    pub reference: Vec<f64>,
    pub trace: Vec<TraceRow>,
}

impl ArCalibration {
    pub fn n_alpha(&self) -> usize {
        self.bases[0].n_alpha()
    }

    pub fn horizon(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.t0 + s.dt)
    }

    pub fn marginal(&self, pi: &[f64]) -> Vec<f64> {
        self.bases[0].marginal(pi)
    }

    fn generators(&self, n: usize) -> Result<[JointGenerator; 2]> {
        let s = &self.steps[n];
        let base = &self.bases[s.interval];
        Ok([JointGenerator::new(base.clone(), s.q[0].clone())?, JointGenerator::new(base.clone(), s.q[1].clone())?])
    }

    /// `pi [I/2 + (I + dt A1)(I + dt A2) / 2]` for step `n`.
    pub fn forward(&self, n: usize, pi: &[f64]) -> Result<Vec<f64>> {
        let [g1, g2] = self.generators(n)?;
        let dt = self.steps[n].dt;
        let star = forward_step(pi, &g1, dt)?;
        let star2 = forward_step(&star, &g2, dt)?;
        Ok(pi.iter().zip(&star2).map(|(a, b)| 0.5 * (a + b)).collect())
    }

    /// Adjoint of [`forward`](Self::forward).
    pub fn backward(&self, n: usize, v: &[f64]) -> Result<Vec<f64>> {
        let [g1, g2] = self.generators(n)?;
        let dt = self.steps[n].dt;
        let inner = backward_step(v, &g2, dt);
        let outer = backward_step(&inner, &g1, dt);
        Ok(v.iter().zip(&outer).map(|(a, b)| 0.5 * (a + b)).collect())
    }

    /// Joint law after `n` steps.
    pub fn joint_at_step(&self, n: usize) -> Result<Vec<f64>> {
        let mut pi = self.initial.clone();
        for k in 0..n {
            pi = self.forward(k, &pi)?;
        }
        Ok(pi)
    }

    /// Lifts a driver payoff to joint states.
    pub fn lift(&self, v: &[f64]) -> Vec<f64> {
        let na = self.n_alpha();
        v.iter().flat_map(|x| std::iter::repeat_n(*x, na)).collect()
    }
}

/// Step schedule: each interval `(T_{k-1}, T_k]` up to `horizon` is cut into
/// `ceil(length / dt)` equal steps.
pub fn step_schedule(maturities: &[f64], dt: f64, horizon: f64) -> Result<Vec<(f64, f64, usize)>> {
    if !(dt > 0.0) {
        return Err(invalid(format!("time step {dt} must be positive")));
    }
    let last = maturities.last().copied().unwrap_or(0.0);
    if !(horizon > 0.0) || horizon > last * (1.0 + 1e-12) {
        return Err(invalid(format!("horizon {horizon} outside (0, {last}]")));
    }
    let mut out = Vec::new();
    let mut start = 0.0;
    for (k, &t) in maturities.iter().enumerate() {
        let end = t.min(horizon);
        if end <= start {
            break;
        }
        let n = ((end - start) / dt - 1e-9).ceil().max(1.0) as usize;
        let h = (end - start) / n as f64;
        out.extend((0..n).map(|s| (start + s as f64 * h, h, k)));
        start = end;
    }
    Ok(out)
}

/// Forward induction over the step schedule. Each step runs two Euler stages,
/// each with multipliers recomputed from the stage's starting law, and
/// averages the result with the step's starting law. The driver marginal then
/// advances by `I + dt A + dt^2 A^2 / 2` of the local-volatility generator.
pub fn forward_induction_calibrate(lv: &LvModel, comp: &ArComponents, dt: f64, horizon: f64) -> Result<ArCalibration> {
    let LvSpace::Two(grid) = &lv.space else {
        return Err(invalid("activity-rate calibration needs a two-factor local-volatility model"));
    };
    let schedule = step_schedule(&lv.sf.maturities, dt, horizon)?;
    let n_int = schedule.last().map_or(0, |s| s.2 + 1);
    let mut bases = Vec::with_capacity(n_int);
    for k in 0..n_int {
        let a = lv.interval_generator(k)?;
        let cond = comp.conditional_generators(&a)?;
        bases.push(Arc::new(JointBase::new(a, grid.p2(), &cond, comp.q_hat.clone(), comp.kernels.clone())?));
    }
    let na = comp.n_alpha();
    let mut initial = vec![0.0; lv.space.len() * na];
    initial[lv.space.origin()? * na + comp.initial_alpha()] = 1.0;
    let mut reference = lv.initial_distribution()?;
    let mut pi = initial.clone();
    let mut steps = Vec::with_capacity(schedule.len());
    let mut trace = Vec::with_capacity(schedule.len());
    for &(t0, h, k) in &schedule {
        let base = &bases[k];
        let q1 = base.bjn_adjustments(&pi, t0)?;
        let star = forward_step(&pi, &JointGenerator::new(base.clone(), q1.clone())?, h)?;
        let q2 = base.bjn_adjustments(&star, t0 + h)?;
        let star2 = forward_step(&star, &JointGenerator::new(base.clone(), q2.clone())?, h)?;
        pi = pi.iter().zip(&star2).map(|(a, b)| 0.5 * (a + b)).collect();
        reference = transient_distribution(&reference, base.a_1d(), h, 1e-14)?.probabilities;
        let marg = base.marginal(&pi);
        let gap = marg.iter().zip(&reference).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let (q_min, q_max) = q_range(base.a_1d(), &q1, &q2);
        trace.push(TraceRow {
            time: t0 + h,
            marginal_gap: gap,
            q_min,
            q_max,
            mass_defect: pi.iter().sum::<f64>() - 1.0,
        });
        steps.push(ArStep { t0, dt: h, interval: k, q: [q1, q2] });
    }
    Ok(ArCalibration { bases, steps, initial, final_joint: pi, reference, trace })
}

fn q_range(a: &SparseGenerator, q1: &[f64], q2: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..a.dim() {
        for p in a.row_range(i) {
            if a.cols()[p] != i {
                for q in [q1[p], q2[p]] {
                    lo = lo.min(q);
                    hi = hi.max(q);
                }
            }
        }
    }
    (lo, hi)
}

/// `m (I + dt A + dt^2 A^2 / 2)^n` over the step schedule, the driver law the
/// calibrated joint chain reproduces.
pub fn stepped_lv_marginal(lv: &LvModel, dt: f64, horizon: f64) -> Result<Vec<f64>> {
    let schedule = step_schedule(&lv.sf.maturities, dt, horizon)?;
    let mut gens: Vec<SparseGenerator> = Vec::new();
    let mut m = lv.initial_distribution()?;
    for &(_, h, k) in &schedule {
        while gens.len() <= k {
            gens.push(lv.interval_generator(gens.len())?);
        }
        let a = &gens[k];
        let ma = a.left_mul(&m);
        let maa = a.left_mul(&ma);
        m = m.iter().zip(&ma).zip(&maa).map(|((x, y), z)| x + h * y + 0.5 * h * h * z).collect();
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grids::build_y_grid;
    use proptest::prelude::*;

    fn toy_a() -> SparseGenerator {
        SparseGenerator::from_triplets(
            3,
            vec![(0, 0, -1.0), (0, 1, 1.0), (1, 0, 0.5), (1, 1, -1.3), (1, 2, 0.8), (2, 1, 2.0), (2, 2, -2.0)],
            Structure::Tridiagonal,
        )
        .unwrap()
    }

    fn toy_cond(scales: &[(f64, f64)]) -> Vec<SparseGenerator> {
        let a = toy_a();
        scales
            .iter()
            .map(|&(u, d)| {
                let g = a.map_values(|i, j, v| {
                    if j > i {
                        u * v
                    } else if j < i {
                        d * v
                    } else {
                        0.0
                    }
                });
                let t: Vec<_> = (0..3)
                    .flat_map(|i| {
                        let out: f64 = (0..3).filter(|&j| j != i).map(|j| g.get(i, j)).sum();
                        let g = &g;
                        (0..3).map(move |j| (i, j, if i == j { -out } else { g.get(i, j) }))
                    })
                    .collect();
                SparseGenerator::from_triplets(3, t, Structure::Tridiagonal).unwrap()
            })
            .collect()
    }

    fn toy_qhat() -> SparseGenerator {
        SparseGenerator::from_triplets(
            2,
            vec![(0, 0, -0.7), (0, 1, 0.7), (1, 0, 0.4), (1, 1, -0.4)],
            Structure::General,
        )
        .unwrap()
    }

    fn toy_kernels() -> JumpKernels {
        JumpKernels::build(&JumpCouplingParams { gamma: [0.3, 0.0], q: [0.5, 0.5] }, [2, 1]).unwrap()
    }

    #[test]
    fn drift_only_is_upwind() {
        let g = build_y_grid(2, 1.0, 2.0).unwrap();
        let one = YGrid { levels: vec![1.0] };
        let ou = OuParams { k: [1.5, 0.0], eta: [0.1, 0.0], nu: [0.0, 0.0], rho_y: 0.0 };
        let q = y_idiosyncratic_generator(&ou, [&g, &one]).unwrap();
        for a in 0..g.len() {
            let (cols, vals) = q.row(a);
            let off: Vec<(usize, f64)> =
                cols.iter().zip(vals).filter(|(c, v)| **c != a && **v != 0.0).map(|(c, v)| (*c, *v)).collect();
            let toward_eta = if g.levels[a].ln() < 0.1 { a + 1 } else { a - 1 };
            if a + 1 < g.len() || g.levels[a].ln() > 0.1 {
                assert_eq!(off.len(), 1, "row {a}");
                assert_eq!(off[0].0, toward_eta);
            }
        }
        let top = g.len() - 1;
        assert!(q.get(top, top - 1) > 0.0);
    }

    #[test]
    fn symmetric_swap_commutes() {
        let g = build_y_grid(2, 1.0, 1.8).unwrap();
        let ou = OuParams { k: [0.8, 0.8], eta: [0.05, 0.05], nu: [0.4, 0.4], rho_y: 0.0 };
        let q = y_idiosyncratic_generator(&ou, [&g, &g]).unwrap().to_dense();
        let n = g.len();
        let perm = DMatrix::from_fn(n * n, n * n, |r, c| if c == (r % n) * n + r / n { 1.0 } else { 0.0 });
        assert!((&perm * &q - &q * &perm).amax() < 1e-13);
    }

    #[test]
    fn steep_correlation_rejected() {
        let g1 = build_y_grid(2, 1.0, 1.5).unwrap();
        let g2 = build_y_grid(2, 1.0, 10.0).unwrap();
        let ou = OuParams { k: [0.0, 0.0], eta: [0.0, 0.0], nu: [0.5, 0.5], rho_y: 0.9 };
        assert!(matches!(y_idiosyncratic_generator(&ou, [&g1, &g2]), Err(Error::Admissibility(_))));
    }

    #[test]
    fn decay_generator_q_one() {
        let (up, down) = decay_generators(4, 1.0).unwrap();
        for a in 0..4 {
            for b in a + 1..4 {
                assert_eq!(up[(a, b)], 1.0);
                assert_eq!(down[(b, a)], 1.0);
            }
            assert_eq!(up[(a, a)], -((3 - a) as f64));
            assert!(up.row(a).sum().abs() < 1e-15 && down.row(a).sum().abs() < 1e-15);
        }
    }

    #[test]
    fn kernel_sign_split() {
        let jp = JumpCouplingParams { gamma: [0.2, 0.1], q: [0.5, 0.5] };
        assert!(JumpKernels::build(&JumpCouplingParams { gamma: [0.0, 0.0], q: [0.5, 0.5] }, [3, 3])
            .unwrap()
            .kernel(1, 0)
            .iter()
            .all(|v| *v == 0.0));
        let k = joint_jump_kernel(&jp, [3, 3], (1, 0)).unwrap();
        let (up, _) = decay_generators(3, 0.5).unwrap();
        let expect =
            (DMatrix::identity(3, 3) + up * 0.2).kronecker(&DMatrix::<f64>::identity(3, 3)) - DMatrix::identity(9, 9);
        assert!((k.clone() - expect).amax() < 1e-15);
        for r in 0..9 {
            assert!(k.row(r).sum().abs() < 1e-15);
        }
        assert!(joint_jump_kernel(&JumpCouplingParams { gamma: [2.0, 0.0], q: [1.0, 1.0] }, [3, 3], (1, 0)).is_err());
    }

    #[test]
    fn marginalization_identity() {
        let cond = toy_cond(&[(1.0, 0.6), (0.4, 1.3)]);
        let base = Arc::new(JointBase::new(toy_a(), 1, &cond, toy_qhat(), toy_kernels()).unwrap());
        let q: Vec<f64> = (0..base.a_1d().stored()).map(|k| 0.5 + 0.1 * k as f64).collect();
        let g = JointGenerator::new(base.clone(), q.clone()).unwrap();
        let full = g.to_sparse().unwrap();
        assert!(full.validate(ROW_SUM_TOL).is_valid());
        for i in 0..3 {
            for a in 0..2 {
                for j in 0..3 {
                    let sum: f64 = (0..2).map(|b| full.get(i * 2 + a, j * 2 + b)).sum();
                    let ahat = if i == j {
                        g.ahat_diag(a, i)
                    } else {
                        q[toy_a().row_range(i).find(|&p| toy_a().cols()[p] == j).unwrap_or(0)] * cond[a].get(i, j)
                    };
                    assert!((sum - ahat).abs() < 1e-13, "{i} {a} {j}");
                }
            }
        }
        let pi: Vec<f64> = (0..6).map(|k| (k + 1) as f64 / 21.0).collect();
        let v: Vec<f64> = (0..6).map(|k| (k as f64).sin()).collect();
        let dense = full.to_dense();
        let lm = g.left_mul(&pi);
        let rm = g.right_mul(&v);
        for c in 0..6 {
            let want: f64 = (0..6).map(|r| pi[r] * dense[(r, c)]).sum();
            assert!((lm[c] - want).abs() < 1e-14);
            let want: f64 = (0..6).map(|k| dense[(c, k)] * v[k]).sum();
            assert!((rm[c] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn trivial_components_give_block_copies() {
        let cond = toy_cond(&[(1.0, 0.6), (0.4, 1.3)]);
        let base = Arc::new(
            JointBase::new(toy_a(), 1, &cond, SparseGenerator::zero(2, Structure::General), JumpKernels::zero(2))
                .unwrap(),
        );
        let g = JointGenerator::new(base, vec![1.0; 7]).unwrap().to_sparse().unwrap();
        for i in 0..3 {
            for j in 0..3 {
                for a in 0..2 {
                    assert_eq!(g.get(i * 2 + a, j * 2 + a), cond[a].get(i, j));
                    assert_eq!(g.get(i * 2 + a, j * 2 + 1 - a), 0.0);
                }
            }
        }
    }

    #[test]
    fn bjn_matches_marginal_increment() {
        let cond = toy_cond(&[(1.0, 0.6), (0.4, 1.3), (2.0, 0.1)]);
        let qhat = SparseGenerator::from_triplets(
            3,
            vec![(0, 0, -0.3), (0, 1, 0.3), (1, 0, 0.2), (1, 1, -0.5), (1, 2, 0.3), (2, 1, 1.0), (2, 2, -1.0)],
            Structure::General,
        )
        .unwrap();
        let kern = JumpKernels::build(&JumpCouplingParams { gamma: [0.2, 0.0], q: [0.7, 1.0] }, [3, 1]).unwrap();
        let base = Arc::new(JointBase::new(toy_a(), 1, &cond, qhat, kern).unwrap());
        let pi: Vec<f64> = [3.0, 1.0, 2.0, 0.5, 0.0, 1.5, 1.0, 2.0, 4.0].iter().map(|v| v / 15.0).collect();
        let q = base.bjn_adjustments(&pi, 0.0).unwrap();
        let g = JointGenerator::new(base.clone(), q).unwrap();
        let lhs = base.marginal(&g.left_mul(&pi));
        let rhs = toy_a().left_mul(&base.marginal(&pi));
        for (a, b) in lhs.iter().zip(&rhs) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn concentrated_start_gives_ratio() {
        let cond = toy_cond(&[(1.0, 0.6), (0.4, 1.3)]);
        let base = Arc::new(JointBase::new(toy_a(), 1, &cond, toy_qhat(), toy_kernels()).unwrap());
        let mut pi = vec![0.0; 6];
        pi[2 + 1] = 1.0;
        let q = base.bjn_adjustments(&pi, 0.0).unwrap();
        let a = toy_a();
        for p in a.row_range(1) {
            let j = a.cols()[p];
            if j != 1 {
                assert!((q[p] - a.get(1, j) / cond[1].get(1, j)).abs() < 1e-15);
            }
        }
        for p in a.row_range(0).chain(a.row_range(2)) {
            assert_eq!(q[p], 1.0);
        }
    }

    #[test]
    fn missing_prior_rate_breaks() {
        let cond = toy_cond(&[(0.0, 1.0), (0.0, 1.0)]);
        let base = Arc::new(JointBase::new(toy_a(), 1, &cond, toy_qhat(), toy_kernels()).unwrap());
        let pi = vec![1.0 / 6.0; 6];
        assert!(matches!(base.bjn_adjustments(&pi, 0.25), Err(Error::CalibrationBreak { from: 0, to: 1, .. })));
    }

    #[test]
    fn unstable_step_rejected() {
        let cond = toy_cond(&[(1.0, 1.0)]);
        let base = Arc::new(
            JointBase::new(toy_a(), 1, &cond, SparseGenerator::zero(1, Structure::General), JumpKernels::zero(1))
                .unwrap(),
        );
        let g = JointGenerator::new(base, vec![1.0; 7]).unwrap();
        let pi = vec![1.0 / 3.0; 3];
        assert_eq!(forward_step(&pi, &g, 0.0).unwrap(), pi);
        match forward_step(&pi, &g, 1.0) {
            Err(Error::Stability { required_dt, .. }) => assert!((required_dt - 0.25).abs() < 1e-15),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn adjusted_generator_is_valid(q in prop::collection::vec(0.0..5.0f64, 7)) {
            let cond = toy_cond(&[(1.0, 0.6), (0.4, 1.3)]);
            let base = Arc::new(JointBase::new(toy_a(), 1, &cond, toy_qhat(), toy_kernels()).unwrap());
            let g = JointGenerator::new(base, q).unwrap().to_sparse().unwrap();
            prop_assert!(g.validate(ROW_SUM_TOL).is_valid());
        }
    }
}
