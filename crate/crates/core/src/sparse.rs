//! Compressed sparse row storage for Markov generators.

use std::io::{BufRead, Write};

use nalgebra::DMatrix;

use crate::error::{invalid, Error, GeneratorReport, Result, Violation};

/// Layout of the state space a generator was built on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Structure {
    General,
    /// Nearest-neighbour chain on a line.
    Tridiagonal,
    /// Two-dimensional lattice with flat index `i * level_size + j`; `i` is the level.
    BlockTridiagonal {
        level_size: usize,
    },
}

/// A square generator in CSR form. The diagonal of every row is always stored.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGenerator {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    structure: Structure,
}

impl SparseGenerator {
    /// Builds from `(row, col, value)` triplets. Duplicates are summed and zero
    /// off-diagonal entries dropped.
    pub fn from_triplets(
        n: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
        structure: Structure,
    ) -> Result<Self> {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (i, j, v) in triplets {
            if i >= n || j >= n {
                return Err(invalid(format!("entry ({i},{j}) outside a {n}x{n} generator")));
            }
            rows[i].push((j, v));
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for (i, mut row) in rows.into_iter().enumerate() {
            row.push((i, 0.0));
            row.sort_by_key(|&(j, _)| j);
            let mut k = 0;
            while k < row.len() {
                let j = row[k].0;
                let mut v = 0.0;
                while k < row.len() && row[k].0 == j {
                    v += row[k].1;
                    k += 1;
                }
                if v != 0.0 || j == i {
                    cols.push(j);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        Ok(Self { n, row_ptr, cols, vals, structure })
    }

    pub fn zero(n: usize, structure: Structure) -> Self {
        Self { n, row_ptr: (0..=n).collect(), cols: (0..n).collect(), vals: vec![0.0; n], structure }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn structure(&self) -> Structure {
        self.structure
    }

    /// Number of stored entries whose value is nonzero.
    pub fn nnz(&self) -> usize {
        self.vals.iter().filter(|v| **v != 0.0).count()
    }

    /// Number of stored entries, including explicit zero diagonals.
    pub fn stored(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.cols[r.clone()], &self.vals[r])
    }

    pub fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        self.row_ptr[i]..self.row_ptr[i + 1]
    }

    pub fn cols(&self) -> &[usize] {
        &self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.vals
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (c, v) = self.row(i);
        c.binary_search(&j).map(|k| v[k]).unwrap_or(0.0)
    }

    pub fn diag(&self, i: usize) -> f64 {
        self.get(i, i)
    }

    /// Largest total exit rate `max_i |a_ii|`.
    pub fn max_exit_rate(&self) -> f64 {
        (0..self.n).map(|i| self.diag(i).abs()).fold(0.0, f64::max)
    }

    /// Iterates over stored entries as `(row, col, value)`.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| self.row_range(i).map(move |k| (i, self.cols[k], self.vals[k])))
    }

    /// `out = x A` for a row vector `x`.
    pub fn left_mul_into(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for k in self.row_range(i) {
                out[self.cols[k]] += xi * self.vals[k];
            }
        }
    }

    /// `out = A v` for a column vector `v`.
    pub fn right_mul_into(&self, v: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.row_range(i).map(|k| self.vals[k] * v[self.cols[k]]).sum();
        }
    }

    pub fn left_mul(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.left_mul_into(x, &mut out);
        out
    }

    pub fn right_mul(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.right_mul_into(v, &mut out);
        out
    }

    /// Same sparsity pattern with every value multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.vals.iter_mut().for_each(|v| *v *= c);
        out
    }

    /// Same pattern, values replaced entry by entry. `f` receives `(row, col, value)`.
    pub fn map_values(&self, mut f: impl FnMut(usize, usize, f64) -> f64) -> Self {
        let mut out = self.clone();
        for i in 0..self.n {
            for k in self.row_range(i) {
                out.vals[k] = f(i, self.cols[k], self.vals[k]);
            }
        }
        out
    }

    /// `sum_k c_k A_k` over the union of the sparsity patterns. Zero coefficients
    /// keep their pattern so that families of combinations share one layout.
    pub fn linear_combination(terms: &[(f64, &SparseGenerator)]) -> Result<Self> {
        let first = terms.first().ok_or_else(|| invalid("empty linear combination"))?.1;
        let n = first.n;
        if terms.iter().any(|(_, g)| g.n != n) {
            return Err(invalid("generators of different dimension"));
        }
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        let mut acc: Vec<(usize, f64)> = Vec::new();
        for i in 0..n {
            acc.clear();
            for (c, g) in terms {
                for k in g.row_range(i) {
                    acc.push((g.cols[k], c * g.vals[k]));
                }
            }
            acc.sort_by_key(|&(j, _)| j);
            let mut k = 0;
            while k < acc.len() {
                let j = acc[k].0;
                let mut v = 0.0;
                while k < acc.len() && acc[k].0 == j {
                    v += acc[k].1;
                    k += 1;
                }
                cols.push(j);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Ok(Self { n, row_ptr, cols, vals, structure: first.structure })
    }

    /// Checks non-negative off-diagonals, non-positive diagonals and zero row
    /// sums within `tol * max |a_row|`.
    pub fn validate(&self, tol: f64) -> GeneratorReport {
        let mut violations = Vec::new();
        for i in 0..self.n {
            let (c, v) = self.row(i);
            let mut sum = 0.0;
            let mut scale: f64 = 0.0;
            for (&j, &a) in c.iter().zip(v) {
                if !a.is_finite() {
                    violations.push(Violation::NonFinite { row: i, col: j });
                    continue;
                }
                sum += a;
                scale = scale.max(a.abs());
                if j == i && a > 0.0 {
                    violations.push(Violation::PositiveDiagonal { row: i, value: a });
                } else if j != i && a < 0.0 {
                    violations.push(Violation::NegativeOffDiagonal { row: i, col: j, value: a });
                }
            }
            if sum.abs() > tol * scale {
                violations.push(Violation::RowSum { row: i, sum });
            }
        }
        GeneratorReport { violations }
    }

    /// Fails with [`Error::InvalidGenerator`] unless [`validate`](Self::validate) is clean.
    pub fn ensure_valid(&self, tol: f64) -> Result<()> {
        let report = self.validate(tol);
        if report.is_valid() {
            Ok(())
        } else {
            Err(Error::InvalidGenerator(report))
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (i, j, v) in self.triplets() {
            m[(i, j)] = v;
        }
        m
    }

    /// Writes `dim` on the first line followed by one `row col value` line per
    /// stored entry.
    pub fn write_coo(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "{}", self.n)?;
        for (i, j, v) in self.triplets() {
            writeln!(w, "{i} {j} {v:.17e}")?;
        }
        Ok(())
    }

    pub fn read_coo(r: impl BufRead, structure: Structure) -> Result<Self> {
        let mut lines = r.lines();
        let parse_err = |line: usize, what: &str| invalid(format!("coordinate list line {line}: {what}"));
        let header =
            lines.next().ok_or_else(|| parse_err(1, "missing dimension"))?.map_err(|e| parse_err(1, &e.to_string()))?;
        let n: usize = header.trim().parse().map_err(|_| parse_err(1, "bad dimension"))?;
        let mut trip = Vec::new();
        for (k, line) in lines.enumerate() {
            let line = line.map_err(|e| parse_err(k + 2, &e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let mut next = || it.next().ok_or_else(|| parse_err(k + 2, "expected `row col value`"));
            let i: usize = next()?.parse().map_err(|_| parse_err(k + 2, "bad row"))?;
            let j: usize = next()?.parse().map_err(|_| parse_err(k + 2, "bad col"))?;
            let v: f64 = next()?.parse().map_err(|_| parse_err(k + 2, "bad value"))?;
            trip.push((i, j, v));
        }
        Self::from_triplets(n, trip, structure)
    }
}

/// Random generators for property tests.
#[cfg(test)]
pub(crate) mod strategies {
    use super::{SparseGenerator, Structure};
    use proptest::prelude::*;

    /// Chain on `n` states with up to three exits per state, a normalized
    /// starting law and a horizon.
    pub fn chain_instance() -> impl Strategy<Value = (SparseGenerator, Vec<f64>, f64)> {
        (2usize..30).prop_flat_map(|n| {
            (
                prop::collection::vec(prop::collection::vec(0.0f64..4.0, 3), n),
                prop::collection::vec(0.01f64..1.0, n),
                0.01f64..2.0,
            )
                .prop_map(move |(rates, w, t)| {
                    let mut trip = Vec::new();
                    for (i, row) in rates.iter().enumerate() {
                        let mut out = 0.0;
                        for (k, &r) in row.iter().enumerate() {
                            let j = (i + k + 1) % n;
                            if j != i && r > 0.0 {
                                trip.push((i, j, r));
                                out += r;
                            }
                        }
                        trip.push((i, i, -out));
                    }
                    let s: f64 = w.iter().sum();
                    let g = SparseGenerator::from_triplets(n, trip, Structure::General).unwrap();
                    (g, w.into_iter().map(|x| x / s).collect(), t)
                })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn birth_death() -> SparseGenerator {
        SparseGenerator::from_triplets(
            3,
            [(0, 0, -1.0), (0, 1, 1.0), (1, 0, 2.0), (1, 1, -5.0), (1, 2, 3.0), (2, 1, 0.5), (2, 2, -0.5)],
            Structure::Tridiagonal,
        )
        .unwrap()
    }

    #[test]
    fn products_match_dense() {
        let g = birth_death();
        let d = g.to_dense();
        let x = [0.2, 0.3, 0.5];
        let left = g.left_mul(&x);
        let dense_left = nalgebra::RowDVector::from_row_slice(&x) * &d;
        let right = g.right_mul(&x);
        let dense_right = &d * nalgebra::DVector::from_column_slice(&x);
        for k in 0..3 {
            assert!((left[k] - dense_left[k]).abs() < 1e-15);
            assert!((right[k] - dense_right[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn duplicates_sum_and_zero_diagonal_kept() {
        let g =
            SparseGenerator::from_triplets(2, [(0, 1, 1.0), (0, 1, 1.0), (0, 0, -2.0)], Structure::General).unwrap();
        assert_eq!(g.get(0, 1), 2.0);
        assert_eq!(g.stored(), 3);
        assert_eq!(g.nnz(), 2);
        assert!(g.validate(1e-12).is_valid());
    }

    #[test]
    fn validate_flags_each_axiom() {
        let g =
            SparseGenerator::from_triplets(2, [(0, 0, 1.0), (0, 1, -1.0), (1, 0, 1.0)], Structure::General).unwrap();
        let r = g.validate(1e-12);
        assert!(r.violations.iter().any(|v| matches!(v, Violation::PositiveDiagonal { row: 0, .. })));
        assert!(r.violations.iter().any(|v| matches!(v, Violation::NegativeOffDiagonal { row: 0, col: 1, .. })));
        assert!(r.violations.iter().any(|v| matches!(v, Violation::RowSum { row: 1, .. })));
    }

    #[test]
    fn coo_round_trip_is_exact() {
        let g = birth_death().scaled(1.0 / 3.0);
        let mut buf = Vec::new();
        g.write_coo(&mut buf).unwrap();
        let back = SparseGenerator::read_coo(buf.as_slice(), Structure::Tridiagonal).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn linear_combination_keeps_union_pattern() {
        let g = birth_death();
        let c = SparseGenerator::linear_combination(&[(0.0, &g), (2.0, &g)]).unwrap();
        assert_eq!(c.stored(), g.stored());
        assert_eq!(c.get(1, 2), 6.0);
    }
}
