//! Markov-chain generators on one- and two-dimensional driver grids.
//!
//! Every builder returns a generator whose off-diagonal rates are non-negative
//! and whose rows sum to zero. Moves that would leave the grid are dropped and
//! the diagonal absorbs the difference, so edge rows are reflecting.

use crate::error::{invalid, Error, GeneratorReport, Result};
use crate::grids::{admissible_band, Grid1D, Grid2D};
use crate::sparse::{SparseGenerator, Structure};

/// Row-sum tolerance used by [`validate_generator`], relative to the largest rate in the row.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Relative slack when checking a uniform step against the admissibility band.
const BAND_SLACK: f64 = 1e-12;

fn check_speeds(s: &[f64], n: usize) -> Result<()> {
    if s.len() != n {
        return Err(invalid(format!("{} speed factors for {n} nodes", s.len())));
    }
    if let Some((i, v)) = s.iter().enumerate().find(|(_, v)| !(**v >= 0.0) || !v.is_finite()) {
        return Err(invalid(format!("speed factor {v} at node {i} must be finite and non-negative")));
    }
    Ok(())
}

/// Tridiagonal generator with interior rates `s_i / (h_-(h_- + h_+))` and
/// `s_i / (h_+(h_- + h_+))`. Edge rows use the mirrored step.
pub fn generator_1d(grid: &Grid1D, s: &[f64]) -> Result<SparseGenerator> {
    let n = grid.len();
    check_speeds(s, n)?;
    let mut trip = Vec::with_capacity(3 * n);
    for i in 0..n {
        let (hm, hp) = (grid.h_minus(i), grid.h_plus(i));
        let mut out = 0.0;
        if i > 0 {
            let down = s[i] / (hm * (hm + hp));
            trip.push((i, i - 1, down));
            out += down;
        }
        if i + 1 < n {
            let up = s[i] / (hp * (hm + hp));
            trip.push((i, i + 1, up));
            out += up;
        }
        trip.push((i, i, -out));
    }
    SparseGenerator::from_triplets(n, trip, Structure::Tridiagonal)
}

/// Pushes a row of up to nine `(di, dj, rate)` moves for node `(i, j)`,
/// dropping moves off the grid and closing the row with the diagonal.
fn push_row(trip: &mut Vec<(usize, usize, f64)>, grid: &Grid2D, i: usize, j: usize, moves: &[(isize, isize, f64)]) {
    let row = grid.index(i, j);
    let mut out = 0.0;
    for &(di, dj, rate) in moves {
        let (ti, tj) = (i as isize + di, j as isize + dj);
        if ti < 0 || tj < 0 || ti as usize >= grid.p1() || tj as usize >= grid.p2() || rate == 0.0 {
            continue;
        }
        trip.push((row, grid.index(ti as usize, tj as usize), rate));
        out += rate;
    }
    trip.push((row, row, -out));
}

fn uniform_step(nodes: &[f64]) -> f64 {
    (nodes[nodes.len() - 1] - nodes[0]) / (nodes.len() - 1) as f64
}

/// Seven-point generator on a uniform grid. Corner moves follow the sign of `rho`.
pub fn generator_2d_uniform(grid: &Grid2D, s: &[f64]) -> Result<SparseGenerator> {
    if !grid.is_uniform() {
        return Err(invalid("generator_2d_uniform needs uniform axes"));
    }
    check_speeds(s, grid.len())?;
    let (s1, s2, rho) = (grid.sigma[0], grid.sigma[1], grid.rho);
    let (d1, d2) = (uniform_step(&grid.axis1), uniform_step(&grid.axis2));
    let band = admissible_band(s1, s2, rho, d1);
    if d2 < band.0 * (1.0 - BAND_SLACK) || d2 > band.1 * (1.0 + BAND_SLACK) {
        return Err(Error::Admissibility(format!("step {d2} outside admissible band [{}, {}]", band.0, band.1)));
    }
    let ax1 = s1 * s1 / (d1 * d1);
    let ax2 = s2 * s2 / (d2 * d2);
    let r = rho.abs() * s1 * s2 / (d1 * d2);
    let corner = if rho >= 0.0 { 1 } else { -1 };
    let mut trip = Vec::with_capacity(7 * grid.len());
    for i in 0..grid.p1() {
        for j in 0..grid.p2() {
            let sk = s[grid.index(i, j)];
            let e1 = 0.5 * sk * (ax1 - r);
            let e2 = 0.5 * sk * (ax2 - r);
            let c = 0.5 * sk * r;
            let moves = [(1, 0, e1), (-1, 0, e1), (0, 1, e2), (0, -1, e2), (1, corner, c), (-1, -corner, c)];
            push_row(&mut trip, grid, i, j, &moves);
        }
    }
    SparseGenerator::from_triplets(grid.len(), trip, Structure::BlockTridiagonal { level_size: grid.p2() })
}

/// Mixed-derivative stencil for nonuniform grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CrossStencil {
    /// Mean of the two one-sided cross differences aligned with the sign of
    /// `rho`. Reduces to the uniform seven-point stencil on uniform grids.
    #[default]
    Averaged,
    /// Nine-point one-sided table; exact on bilinear functions but does not
    /// reduce to the uniform stencil.
    NinePoint,
}

struct Steps {
    h1m: f64,
    h1p: f64,
    h2m: f64,
    h2p: f64,
}

fn steps(axis: &[f64], i: usize) -> (f64, f64) {
    let n = axis.len();
    let hm = if i == 0 { axis[1] - axis[0] } else { axis[i] - axis[i - 1] };
    let hp = if i + 1 == n { axis[n - 1] - axis[n - 2] } else { axis[i + 1] - axis[i] };
    (hm, hp)
}

/// Coefficients `g[di+1][dj+1]` of the mixed derivative at one node.
fn cross_coefficients(h: &Steps, rho: f64, stencil: CrossStencil) -> [[f64; 3]; 3] {
    let Steps { h1m, h1p, h2m, h2p } = *h;
    let mut g = [[0.0; 3]; 3];
    match stencil {
        CrossStencil::Averaged if rho >= 0.0 => {
            let p = 0.5 / (h1p * h2p);
            let m = 0.5 / (h1m * h2m);
            g[2][2] = p;
            g[2][1] = -p;
            g[1][2] = -p;
            g[0][0] = m;
            g[0][1] = -m;
            g[1][0] = -m;
            g[1][1] = p + m;
        }
        CrossStencil::Averaged => {
            let pm = 0.5 / (h1p * h2m);
            let mp = 0.5 / (h1m * h2p);
            g[2][1] = pm;
            g[2][0] = -pm;
            g[1][0] = pm;
            g[1][2] = mp;
            g[0][2] = -mp;
            g[0][1] = mp;
            g[1][1] = -(pm + mp);
        }
        CrossStencil::NinePoint if rho >= 0.0 => {
            g[0][0] = 1.0 / (h1m * h2m);
            g[0][2] = 1.0 / ((h1m + h1p) * h2p);
            g[0][1] = -g[0][0] - g[0][2];
            g[1][0] = -1.0 / (h1m * h2m);
            g[1][2] = -1.0 / (h1p * h2p);
            g[1][1] = -g[1][0] - g[1][2];
            g[2][2] = h1m / (h1p * (h1m + h1p) * h2p);
            g[2][1] = -g[2][2];
        }
        CrossStencil::NinePoint => {
            g[0][2] = -h1p / (h1m * (h1m + h1p) * h2p);
            g[0][1] = -g[0][2];
            g[1][0] = 1.0 / (h2m * h1p);
            g[1][2] = 1.0 / (h1m * h2p);
            g[1][1] = -g[1][0] - g[1][2];
            g[2][0] = -1.0 / (h2m * h1p);
            g[2][2] = -1.0 / ((h1m + h1p) * h2p);
            g[2][1] = -g[2][0] - g[2][2];
        }
    }
    g
}

/// Generator on a tensor grid with arbitrary steps. Every off-diagonal rate is
/// checked; the first negative one is reported with its node.
pub fn generator_2d_nonuniform(grid: &Grid2D, s: &[f64], stencil: CrossStencil) -> Result<SparseGenerator> {
    check_speeds(s, grid.len())?;
    let (s1, s2, rho) = (grid.sigma[0], grid.sigma[1], grid.rho);
    let mut trip = Vec::with_capacity(9 * grid.len());
    for i in 0..grid.p1() {
        let (h1m, h1p) = steps(&grid.axis1, i);
        for j in 0..grid.p2() {
            let (h2m, h2p) = steps(&grid.axis2, j);
            let sk = s[grid.index(i, j)];
            let g = cross_coefficients(&Steps { h1m, h1p, h2m, h2p }, rho, stencil);
            let mut rates = [[0.0; 3]; 3];
            for (a, row) in rates.iter_mut().enumerate() {
                for (b, v) in row.iter_mut().enumerate() {
                    *v = sk * rho * s1 * s2 * g[a][b];
                }
            }
            rates[0][1] += sk * s1 * s1 / (h1m * (h1m + h1p));
            rates[2][1] += sk * s1 * s1 / (h1p * (h1m + h1p));
            rates[1][0] += sk * s2 * s2 / (h2m * (h2m + h2p));
            rates[1][2] += sk * s2 * s2 / (h2p * (h2m + h2p));
            let mut moves = Vec::with_capacity(8);
            for (a, row) in rates.iter().enumerate() {
                for (b, &v) in row.iter().enumerate() {
                    if a == 1 && b == 1 {
                        continue;
                    }
                    let (di, dj) = (a as isize - 1, b as isize - 1);
                    let (ti, tj) = (i as isize + di, j as isize + dj);
                    let inside = ti >= 0 && tj >= 0 && (ti as usize) < grid.p1() && (tj as usize) < grid.p2();
                    if inside && v < 0.0 {
                        return Err(Error::Admissibility(format!(
                            "negative rate {v:.6e} from node ({i},{j}) to ({ti},{tj})"
                        )));
                    }
                    moves.push((di, dj, v));
                }
            }
            push_row(&mut trip, grid, i, j, &moves);
        }
    }
    SparseGenerator::from_triplets(grid.len(), trip, Structure::BlockTridiagonal { level_size: grid.p2() })
}

/// Central-difference mixed derivative with no sign control. Not a valid
/// generator for `|rho| > 0`; kept to exercise [`validate_generator`].
pub fn generator_2d_central_mixed(grid: &Grid2D, s: &[f64]) -> Result<SparseGenerator> {
    check_speeds(s, grid.len())?;
    let (s1, s2, rho) = (grid.sigma[0], grid.sigma[1], grid.rho);
    let mut trip = Vec::with_capacity(9 * grid.len());
    for i in 0..grid.p1() {
        let (h1m, h1p) = steps(&grid.axis1, i);
        for j in 0..grid.p2() {
            let (h2m, h2p) = steps(&grid.axis2, j);
            let sk = s[grid.index(i, j)];
            let c = sk * rho * s1 * s2 / ((h1m + h1p) * (h2m + h2p));
            let moves = [
                (-1, 0, sk * s1 * s1 / (h1m * (h1m + h1p))),
                (1, 0, sk * s1 * s1 / (h1p * (h1m + h1p))),
                (0, -1, sk * s2 * s2 / (h2m * (h2m + h2p))),
                (0, 1, sk * s2 * s2 / (h2p * (h2m + h2p))),
                (1, 1, c),
                (-1, -1, c),
                (1, -1, -c),
                (-1, 1, -c),
            ];
            let row = grid.index(i, j);
            let mut out = 0.0;
            for (di, dj, v) in moves {
                let (ti, tj) = (i as isize + di, j as isize + dj);
                if ti < 0 || tj < 0 || ti as usize >= grid.p1() || tj as usize >= grid.p2() {
                    continue;
                }
                trip.push((row, grid.index(ti as usize, tj as usize), v));
                out += v;
            }
            trip.push((row, row, -out));
        }
    }
    SparseGenerator::from_triplets(grid.len(), trip, Structure::BlockTridiagonal { level_size: grid.p2() })
}

/// Level-changing and within-level parts of a block-tridiagonal generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSplit {
    /// Moves between levels, diagonal `-F_hat`.
    pub a1: SparseGenerator,
    /// Moves within a level, diagonal of `L + F_hat`.
    pub a2: SparseGenerator,
}

pub fn split_generator(g: &SparseGenerator) -> Result<GeneratorSplit> {
    let Structure::BlockTridiagonal { level_size } = g.structure() else {
        return Err(invalid("split needs a block-tridiagonal generator"));
    };
    let n = g.dim();
    let mut t1 = Vec::new();
    let mut t2 = Vec::new();
    for i in 0..n {
        let (cols, vals) = g.row(i);
        let mut f_hat = 0.0;
        let mut diag = 0.0;
        for (&j, &v) in cols.iter().zip(vals) {
            if j == i {
                diag = v;
            } else if j / level_size != i / level_size {
                if (j / level_size).abs_diff(i / level_size) > 1 {
                    return Err(invalid(format!("entry ({i},{j}) skips a level")));
                }
                t1.push((i, j, v));
                f_hat += v;
            } else {
                t2.push((i, j, v));
            }
        }
        t1.push((i, i, -f_hat));
        t2.push((i, i, diag + f_hat));
    }
    let s = g.structure();
    Ok(GeneratorSplit { a1: SparseGenerator::from_triplets(n, t1, s)?, a2: SparseGenerator::from_triplets(n, t2, s)? })
}

/// `y1 a1 + y2 a2`, on the union pattern of both parts.
pub fn conditional_generator(split: &GeneratorSplit, y1: f64, y2: f64) -> Result<SparseGenerator> {
    if !(y1 >= 0.0 && y2 >= 0.0) {
        return Err(invalid(format!("activities ({y1}, {y2}) must be non-negative")));
    }
    SparseGenerator::linear_combination(&[(y1, &split.a1), (y2, &split.a2)])
}

pub fn validate_generator(g: &SparseGenerator) -> GeneratorReport {
    g.validate(ROW_SUM_TOL)
}

/// Upper bound on stored nonzeros of a `p x p` seven-point generator as
/// quoted for the block layout.
pub fn qbd_nonzero_formula(p: usize) -> usize {
    (3 * p - 2) * p + 2 * (2 * p - 1) * (2 * p - 1)
}

/// Exact nonzero count of a `p x p` seven-point generator with `rho != 0`:
/// `p` tridiagonal diagonal blocks and `2(p - 1)` bidiagonal off-diagonal blocks.
pub fn qbd_nonzero_exact(p: usize) -> usize {
    (3 * p - 2) * p + 2 * (p - 1) * (2 * p - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grids::{build_z_grid, build_z_grid_2d, AxisSpec};
    use proptest::prelude::*;

    fn uniform_grid(p: usize, step: f64, rho: f64) -> Grid2D {
        let a = AxisSpec::Uniform { center: step * p as f64, step, count: p };
        build_z_grid_2d(&a, &a, 1.0, 1.0, rho).unwrap().0
    }

    #[test]
    fn zero_speed_is_zero_generator() {
        let g = build_z_grid(&[], 0.5, 2.0, 9).unwrap();
        let a = generator_1d(&g, &[0.0; 9]).unwrap();
        assert_eq!(a.nnz(), 0);
        assert!(validate_generator(&a).is_valid());
    }

    #[test]
    fn lognormal_uniform_rates() {
        let nodes: Vec<f64> = (1..=9).map(|k| k as f64 * 0.25).collect();
        let g = Grid1D::from_nodes(nodes.clone(), &[]).unwrap();
        let sig: f64 = 0.3;
        let s: Vec<f64> = nodes.iter().map(|z| sig * sig * z * z).collect();
        let a = generator_1d(&g, &s).unwrap();
        for i in 1..8 {
            let want = sig * sig * nodes[i] * nodes[i] / (2.0 * 0.25 * 0.25);
            assert!((a.get(i, i - 1) - want).abs() < 1e-13);
            assert!((a.get(i, i + 1) - want).abs() < 1e-13);
        }
    }

    #[test]
    fn negative_speed_rejected() {
        let g = build_z_grid(&[], 0.5, 2.0, 5).unwrap();
        assert!(generator_1d(&g, &[0.1, -0.1, 0.1, 0.1, 0.1]).is_err());
    }

    #[test]
    fn worked_uniform_entries() {
        let g = uniform_grid(5, 0.1, 0.5);
        let a = generator_2d_uniform(&g, &[1.0; 25]).unwrap();
        let c = g.index(2, 2);
        assert!((a.get(c, g.index(3, 2)) - 25.0).abs() < 1e-9);
        assert!((a.get(c, g.index(3, 3)) - 25.0).abs() < 1e-9);
        assert_eq!(a.get(c, g.index(3, 1)), 0.0);
        assert!((a.diag(c) + 150.0).abs() < 1e-9);
        assert!(validate_generator(&a).is_valid());
    }

    #[test]
    fn negative_rho_switches_corners() {
        let g = uniform_grid(5, 0.1, -0.5);
        let a = generator_2d_uniform(&g, &[1.0; 25]).unwrap();
        let c = g.index(2, 2);
        assert!(a.get(c, g.index(3, 1)) > 0.0 && a.get(c, g.index(1, 3)) > 0.0);
        assert_eq!(a.get(c, g.index(3, 3)), 0.0);
    }

    #[test]
    fn zero_rho_has_no_corners_and_splits_by_axis() {
        let g = uniform_grid(5, 0.1, 0.0);
        let a = generator_2d_uniform(&g, &[1.0; 25]).unwrap();
        for (i, j, _) in a.triplets() {
            assert!(i / 5 == j / 5 || i % 5 == j % 5, "corner move {i}->{j}");
        }
        let sp = split_generator(&a).unwrap();
        assert!(sp.a1.triplets().all(|(i, j, _)| i == j || i % 5 == j % 5));
        assert!(sp.a2.triplets().all(|(i, j, _)| i / 5 == j / 5));
    }

    #[test]
    fn out_of_band_step_rejected() {
        let a1 = AxisSpec::Nodes((0..5).map(|k| 0.8 + 0.1 * k as f64).collect());
        let a2 = AxisSpec::Nodes((0..5).map(|k| 0.5 + 0.3 * k as f64).collect());
        let (mut g, _) = build_z_grid_2d(&a1, &a2, 1.0, 1.0, 0.5).unwrap();
        g.uniform = [true, true];
        assert!(matches!(generator_2d_uniform(&g, &[1.0; 25]), Err(Error::Admissibility(_))));
    }

    #[test]
    fn nonzero_count_true_layout() {
        for p in [3, 5, 11, 21] {
            let g = uniform_grid(p, 0.01, 0.5);
            let a = generator_2d_uniform(&g, &vec![1.0; p * p]).unwrap();
            assert_eq!(a.nnz(), qbd_nonzero_exact(p));
            assert!(a.nnz() <= qbd_nonzero_formula(p));
        }
        assert_eq!(qbd_nonzero_exact(100), 69_202);
        assert_eq!(qbd_nonzero_formula(100), 109_002);
    }

    #[test]
    fn averaged_stencil_reduces_to_uniform() {
        for rho in [-0.6, -0.2, 0.0, 0.3, 0.7] {
            let g = uniform_grid(11, 0.05, rho);
            let s: Vec<f64> = (0..121).map(|k| 0.5 + (k % 7) as f64 * 0.1).collect();
            let u = generator_2d_uniform(&g, &s).unwrap();
            let n = generator_2d_nonuniform(&g, &s, CrossStencil::Averaged).unwrap();
            let du = u.to_dense();
            let dn = n.to_dense();
            let scale = du.amax();
            assert!((du - dn).amax() < 1e-12 * scale, "rho = {rho}");
        }
    }

    #[test]
    fn mixed_derivative_of_bilinear_function() {
        let a1: Vec<f64> = [0.5, 0.6, 0.75, 0.85, 1.0, 1.1, 1.3, 1.4, 1.6].to_vec();
        let a2: Vec<f64> = [0.4, 0.52, 0.6, 0.71, 0.8, 0.95, 1.05, 1.2, 1.3].to_vec();
        for (stencil, rho) in [
            (CrossStencil::Averaged, 0.3),
            (CrossStencil::Averaged, -0.3),
            (CrossStencil::NinePoint, 0.1),
            (CrossStencil::NinePoint, -0.1),
        ] {
            let (g, _) =
                build_z_grid_2d(&AxisSpec::Nodes(a1.clone()), &AxisSpec::Nodes(a2.clone()), 0.4, 0.5, rho).unwrap();
            let s = vec![2.0; g.len()];
            let a = generator_2d_nonuniform(&g, &s, stencil).unwrap();
            let v: Vec<f64> = (0..g.len()).map(|k| g.coords(k).0 * g.coords(k).1).collect();
            let av = a.right_mul(&v);
            for i in 1..8 {
                for j in 1..8 {
                    let want = rho * 0.4 * 0.5 * 2.0;
                    assert!((av[g.index(i, j)] - want).abs() < 1e-10, "{stencil:?} rho={rho} ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn nonuniform_negative_rate_reported() {
        let a1 = AxisSpec::Nodes(vec![0.5, 0.51, 1.5, 2.5, 3.5]);
        let a2 = AxisSpec::Nodes(vec![0.5, 1.5, 2.5, 3.5, 4.5]);
        let (g, _) = build_z_grid_2d(&a1, &a2, 1.0, 1.0, 0.9).unwrap();
        let err = generator_2d_nonuniform(&g, &[1.0; 25], CrossStencil::Averaged).unwrap_err();
        assert!(matches!(err, Error::Admissibility(m) if m.contains("node")));
    }

    #[test]
    fn central_mixed_discretisation_is_invalid() {
        let g = uniform_grid(9, 0.1, 0.9);
        let a = generator_2d_central_mixed(&g, &vec![1.0; 81]).unwrap();
        let report = validate_generator(&a);
        assert!(!report.is_valid());
    }

    #[test]
    fn flipped_sign_single_violation() {
        let g = build_z_grid(&[], 0.5, 2.0, 7).unwrap();
        let a = generator_1d(&g, &[0.3; 7]).unwrap();
        let b = a.map_values(|i, j, v| if (i, j) == (3, 4) { -v } else { v });
        let r = validate_generator(&b);
        assert!(r
            .violations
            .iter()
            .any(|v| matches!(v, crate::error::Violation::NegativeOffDiagonal { row: 3, col: 4, .. })));
        assert_eq!(
            r.violations.iter().filter(|v| matches!(v, crate::error::Violation::NegativeOffDiagonal { .. })).count(),
            1
        );
    }

    #[test]
    fn conditional_generator_scaling() {
        let g = uniform_grid(5, 0.1, 0.5);
        let a = generator_2d_uniform(&g, &[1.0; 25]).unwrap();
        let sp = split_generator(&a).unwrap();
        let one = conditional_generator(&sp, 1.0, 1.0).unwrap();
        assert!((one.to_dense() - a.to_dense()).amax() < 1e-13);
        let lvl = conditional_generator(&sp, 2.0, 0.0).unwrap();
        assert!((lvl.to_dense() - sp.a1.to_dense() * 2.0).amax() == 0.0);
        // within-level off-diagonals scale with y2, the -F_hat diagonal with y1
        let mixed = conditional_generator(&sp, 3.0, 0.5).unwrap();
        let c = g.index(2, 2);
        assert_eq!(mixed.get(c, g.index(2, 3)), 0.5 * a.get(c, g.index(2, 3)));
        assert_eq!(mixed.get(c, g.index(3, 2)), 3.0 * a.get(c, g.index(3, 2)));
        let f_hat = -sp.a1.diag(c);
        let l_diag = a.diag(c) + f_hat;
        assert!((mixed.diag(c) - (0.5 * l_diag - 3.0 * f_hat)).abs() < 1e-12);
        assert!(conditional_generator(&sp, -1.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn builders_emit_valid_generators(
            rho in -0.9..0.9f64,
            p in 3usize..9,
            seed in prop::collection::vec(0.05..3.0f64, 81),
            steps1 in prop::collection::vec(0.05..0.2f64, 8),
        ) {
            let s: Vec<f64> = seed[..p * p].to_vec();
            let d1: f64 = 0.1;
            let band = admissible_band(1.0, 0.8, rho, d1);
            let d2 = 0.5 * (band.0 + band.1.min(10.0 * d1));
            let ax1 = AxisSpec::Uniform { center: 10.0 * d1, step: d1, count: if p % 2 == 0 { p + 1 } else { p } };
            let ax2 = AxisSpec::Uniform { center: 10.0 * d2, step: d2, count: if p % 2 == 0 { p + 1 } else { p } };
            let (g, _) = build_z_grid_2d(&ax1, &ax2, 1.0, 0.8, rho).unwrap();
            let s = if s.len() == g.len() { s } else { seed[..g.len()].to_vec() };
            let a = generator_2d_uniform(&g, &s).unwrap();
            prop_assert!(validate_generator(&a).is_valid());
            let sp = split_generator(&a).unwrap();
            prop_assert!(validate_generator(&sp.a1).is_valid());
            prop_assert!(validate_generator(&sp.a2).is_valid());
            let back = SparseGenerator::linear_combination(&[(1.0, &sp.a1), (1.0, &sp.a2)]).unwrap();
            prop_assert!((back.to_dense() - a.to_dense()).amax() <= 1e-14 * a.max_exit_rate());
            // interior zero drift in both coordinates
            let z1: Vec<f64> = (0..g.len()).map(|k| g.coords(k).0).collect();
            let z2: Vec<f64> = (0..g.len()).map(|k| g.coords(k).1).collect();
            let (m1, m2) = (a.right_mul(&z1), a.right_mul(&z2));
            for i in 1..g.p1() - 1 {
                for j in 1..g.p2() - 1 {
                    let k = g.index(i, j);
                    prop_assert!(m1[k].abs() < 1e-9 * a.max_exit_rate());
                    prop_assert!(m2[k].abs() < 1e-9 * a.max_exit_rate());
                }
            }
            let nodes: Vec<f64> = steps1.iter().scan(0.3, |z, h| { *z += h; Some(*z) }).collect();
            let g1 = Grid1D::from_nodes(nodes.clone(), &[]).unwrap();
            let a1 = generator_1d(&g1, &seed[..nodes.len()]).unwrap();
            prop_assert!(validate_generator(&a1).is_valid());
            let m = a1.right_mul(&nodes);
            for (i, v) in m.iter().enumerate().take(nodes.len() - 1).skip(1) {
                prop_assert!(v.abs() < 1e-12 * a1.max_exit_rate(), "row {}", i);
            }
        }

        #[test]
        fn conditional_generator_is_linear(y1 in 0.0..4.0f64, y2 in 0.0..4.0f64, k in 0i32..4) {
            let g = uniform_grid(5, 0.1, 0.4);
            let a = generator_2d_uniform(&g, &[1.0; 25]).unwrap();
            let sp = split_generator(&a).unwrap();
            let scale = 2f64.powi(k);
            let lhs = conditional_generator(&sp, scale * y1, scale * y2).unwrap();
            let rhs = conditional_generator(&sp, y1, y2).unwrap().scaled(scale);
            prop_assert_eq!(lhs, rhs);
            prop_assert!(validate_generator(&conditional_generator(&sp, y1, y2).unwrap()).is_valid());
        }
    }
}
