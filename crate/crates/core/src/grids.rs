//! State grids for the driver factors, the activity levels and the dilaton.

use crate::error::{invalid, Error, Result};

/// Strikes closer than this to an existing node replace it.
const MERGE_DISTANCE: f64 = 1e-10;

/// Strictly increasing positive nodes with quoted strikes pinned on nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid1D {
    nodes: Vec<f64>,
    anchor_indices: Vec<usize>,
}

impl Grid1D {
    /// Takes `nodes` as the base and pins each strike on a node.
    pub fn from_nodes(nodes: Vec<f64>, strikes: &[f64]) -> Result<Self> {
        check_increasing(&nodes)?;
        let mut nodes = nodes;
        for &k in strikes {
            if !(k > nodes[0] && k < nodes[nodes.len() - 1]) && !nodes.contains(&k) {
                return Err(invalid(format!("strike {k} outside grid range")));
            }
            pin(&mut nodes, k);
        }
        let anchor_indices = strikes.iter().map(|k| position(&nodes, *k).expect("pinned")).collect();
        Ok(Self { nodes, anchor_indices })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Node index of each strike, in input order.
    pub fn anchor_indices(&self) -> &[usize] {
        &self.anchor_indices
    }

    /// Index of a node equal to `z`.
    pub fn index_of(&self, z: f64) -> Option<usize> {
        position(&self.nodes, z)
    }

    /// Copy with `z` pinned as a node; existing anchors are kept.
    pub fn with_node(&self, z: f64) -> Result<Self> {
        let strikes: Vec<f64> = self.anchor_indices.iter().map(|&i| self.nodes[i]).collect();
        let mut nodes = self.nodes.clone();
        pin(&mut nodes, z);
        let mut g = Self::from_nodes(nodes, &strikes)?;
        g.anchor_indices = strikes.iter().map(|k| position(&g.nodes, *k).expect("pinned")).collect();
        Ok(g)
    }

    /// Left step `z_i - z_{i-1}`, mirrored at the lower edge.
    pub fn h_minus(&self, i: usize) -> f64 {
        if i == 0 {
            self.nodes[1] - self.nodes[0]
        } else {
            self.nodes[i] - self.nodes[i - 1]
        }
    }

    /// Right step `z_{i+1} - z_i`, mirrored at the upper edge.
    pub fn h_plus(&self, i: usize) -> f64 {
        let n = self.nodes.len();
        if i + 1 == n {
            self.nodes[n - 1] - self.nodes[n - 2]
        } else {
            self.nodes[i + 1] - self.nodes[i]
        }
    }
}

fn check_increasing(nodes: &[f64]) -> Result<()> {
    if nodes.len() < 3 {
        return Err(invalid("a grid needs at least three nodes"));
    }
    if nodes.iter().any(|z| !z.is_finite() || *z <= 0.0) {
        return Err(invalid("grid nodes must be finite and positive"));
    }
    if nodes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("grid nodes must be strictly increasing"));
    }
    Ok(())
}

fn position(nodes: &[f64], z: f64) -> Option<usize> {
    nodes.iter().position(|&x| x == z)
}

fn pin(nodes: &mut Vec<f64>, k: f64) {
    let at = nodes.partition_point(|&x| x < k);
    for near in [at.wrapping_sub(1), at] {
        if near < nodes.len() && (nodes[near] - k).abs() < MERGE_DISTANCE {
            nodes[near] = k;
            return;
        }
    }
    nodes.insert(at, k);
}

/// Geometric grid on `[z_min, z_max]` with `target_count` base nodes and every
/// strike pinned on a node.
pub fn build_z_grid(strikes: &[f64], z_min: f64, z_max: f64, target_count: usize) -> Result<Grid1D> {
    if !(z_min > 0.0 && z_max > z_min) {
        return Err(invalid(format!("need 0 < z_min < z_max, got [{z_min}, {z_max}]")));
    }
    if target_count < strikes.len() + 4 {
        return Err(invalid(format!("target_count {target_count} below strikes + 4 = {}", strikes.len() + 4)));
    }
    if let Some(k) = strikes.iter().find(|k| !(**k > z_min && **k < z_max)) {
        return Err(invalid(format!("strike {k} outside ({z_min}, {z_max})")));
    }
    let ratio = (z_max / z_min).ln() / (target_count - 1) as f64;
    let mut nodes: Vec<f64> = (0..target_count).map(|i| z_min * (ratio * i as f64).exp()).collect();
    nodes[target_count - 1] = z_max;
    Grid1D::from_nodes(nodes, strikes)
}

/// One axis of a two-dimensional grid.
#[derive(Debug, Clone, PartialEq)]
pub enum AxisSpec {
    /// `count` (odd) nodes with constant `step`, centred on `center`.
    Uniform {
        center: f64,
        step: f64,
        count: usize,
    },
    Nodes(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D {
    pub axis1: Vec<f64>,
    pub axis2: Vec<f64>,
    pub uniform: [bool; 2],
    pub sigma: [f64; 2],
    pub rho: f64,
}

/// Record of a second-axis step moved into the admissibility band.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepAdjustment {
    pub requested: f64,
    pub adjusted: f64,
    pub band: (f64, f64),
}

impl Grid2D {
    pub fn p1(&self) -> usize {
        self.axis1.len()
    }

    pub fn p2(&self) -> usize {
        self.axis2.len()
    }

    pub fn len(&self) -> usize {
        self.p1() * self.p2()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.p2() + j
    }

    pub fn coords(&self, k: usize) -> (f64, f64) {
        (self.axis1[k / self.p2()], self.axis2[k % self.p2()])
    }

    pub fn is_uniform(&self) -> bool {
        self.uniform[0] && self.uniform[1]
    }

    /// Index of the node `(z1, z2)` if both are nodes.
    pub fn index_of(&self, z1: f64, z2: f64) -> Option<usize> {
        let i = position(&self.axis1, z1)?;
        let j = position(&self.axis2, z2)?;
        Some(self.index(i, j))
    }
}

/// Range of second-axis steps for which the uniform seven-point stencil has
/// non-negative rates.
pub fn admissible_band(sigma1: f64, sigma2: f64, rho: f64, delta1: f64) -> (f64, f64) {
    let r = rho.abs();
    let lo = r * sigma2 / sigma1 * delta1;
    let hi = if r == 0.0 { f64::INFINITY } else { sigma2 * delta1 / (r * sigma1) };
    (lo, hi)
}

fn axis_nodes(spec: &AxisSpec) -> Result<(Vec<f64>, bool)> {
    match spec {
        AxisSpec::Uniform { center, step, count } => {
            if count % 2 == 0 || *count < 3 || *step <= 0.0 {
                return Err(invalid("uniform axis needs odd count >= 3 and positive step"));
            }
            let half = (count / 2) as f64;
            let nodes: Vec<f64> = (0..*count).map(|k| center + (k as f64 - half) * step).collect();
            check_increasing(&nodes)?;
            Ok((nodes, true))
        }
        AxisSpec::Nodes(nodes) => {
            check_increasing(nodes)?;
            Ok((nodes.clone(), false))
        }
    }
}

/// Product grid. When both axes are uniform and the second step violates the
/// admissibility band it is moved to the band midpoint and reported.
pub fn build_z_grid_2d(
    axis1: &AxisSpec,
    axis2: &AxisSpec,
    sigma1: f64,
    sigma2: f64,
    rho: f64,
) -> Result<(Grid2D, Option<StepAdjustment>)> {
    if !(sigma1 > 0.0 && sigma2 > 0.0) {
        return Err(invalid("need positive volatilities"));
    }
    if !(rho.abs() < 1.0) {
        return Err(Error::Admissibility(format!("|rho| = {} leaves no admissible step band", rho.abs())));
    }
    let (a1, u1) = axis_nodes(axis1)?;
    let (mut a2, u2) = axis_nodes(axis2)?;
    let mut adjustment = None;
    if let (AxisSpec::Uniform { step: d1, .. }, AxisSpec::Uniform { center, step: d2, count }) = (axis1, axis2) {
        let band = admissible_band(sigma1, sigma2, rho, *d1);
        if *d2 < band.0 || *d2 > band.1 {
            let adjusted = 0.5 * (band.0 + band.1);
            let spec = AxisSpec::Uniform { center: *center, step: adjusted, count: *count };
            a2 = axis_nodes(&spec)
                .map_err(|_| Error::Admissibility(format!("adjusted step {adjusted} leaves the positive axis")))?
                .0;
            adjustment = Some(StepAdjustment { requested: *d2, adjusted, band });
        }
    }
    Ok((Grid2D { axis1: a1, axis2: a2, uniform: [u1, u2], sigma: [sigma1, sigma2], rho }, adjustment))
}

/// Log-uniform activity levels `y_mid * spread^((k - q) / q)`, `k = 0..=2q`.
#[derive(Debug, Clone, PartialEq)]
pub struct YGrid {
    pub levels: Vec<f64>,
}

impl YGrid {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Constant spacing of `ln y`.
    pub fn log_step(&self) -> f64 {
        (self.levels[1] / self.levels[0]).ln()
    }
}

pub fn build_y_grid(q: usize, y_mid: f64, spread: f64) -> Result<YGrid> {
    if q == 0 || !(y_mid > 0.0) || !(spread > 1.0) {
        return Err(invalid("y grid needs q >= 1, y_mid > 0 and spread > 1"));
    }
    let levels = (0..=2 * q).map(|k| y_mid * spread.powf((k as f64 - q as f64) / q as f64)).collect();
    Ok(YGrid { levels })
}

/// Log-spaced support for the dilaton.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaGrid {
    pub nodes: Vec<f64>,
}

impl ThetaGrid {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Covers at least `[mean / 5, 5 mean]` and `mean +/- 5 std` on the positive axis.
pub fn build_theta_grid(mean: f64, std: f64, count: usize) -> Result<ThetaGrid> {
    if !(mean > 0.0) || std < 0.0 || count < 3 {
        return Err(invalid("theta grid needs mean > 0, std >= 0 and count >= 3"));
    }
    let lo = (mean / 5.0).min(mean - 5.0 * std).max(mean / 50.0);
    let hi = (5.0 * mean).max(mean + 5.0 * std);
    let step = (hi / lo).ln() / (count - 1) as f64;
    let mut nodes: Vec<f64> = (0..count).map(|k| lo * (step * k as f64).exp()).collect();
    nodes[count - 1] = hi;
    Ok(ThetaGrid { nodes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_strike_lands_on_node() {
        let g = build_z_grid(&[1.0], 0.2, 5.0, 21).unwrap();
        assert!(g.index_of(1.0).is_some());
        assert!((21..=22).contains(&g.len()));
        assert_eq!(g.nodes()[g.anchor_indices()[0]], 1.0);
    }

    #[test]
    fn too_few_nodes_rejected() {
        assert!(build_z_grid(&[0.9, 1.0, 1.1], 0.2, 5.0, 6).is_err());
        assert!(build_z_grid(&[6.0], 0.2, 5.0, 21).is_err());
    }

    #[test]
    fn band_midpoint_adjustment() {
        let a1 = AxisSpec::Uniform { center: 1.0, step: 0.1, count: 11 };
        let a2 = AxisSpec::Uniform { center: 1.0, step: 0.3, count: 5 };
        let (g, adj) = build_z_grid_2d(&a1, &a2, 1.0, 1.0, 0.5).unwrap();
        let adj = adj.unwrap();
        assert!((adj.band.0 - 0.05).abs() < 1e-15 && (adj.band.1 - 0.2).abs() < 1e-15);
        assert!((adj.adjusted - 0.125).abs() < 1e-15);
        assert!((g.axis2[1] - g.axis2[0] - 0.125).abs() < 1e-12);
    }

    #[test]
    fn y_grid_levels() {
        let y = build_y_grid(1, 1.0, 2.0).unwrap();
        assert_eq!(y.levels, vec![0.5, 1.0, 2.0]);
    }

    #[test]
    fn theta_grid_covers_prior() {
        let t = build_theta_grid(1.0, 0.3, 15).unwrap();
        assert!(t.nodes[0] <= 0.2 + 1e-15 && *t.nodes.last().unwrap() >= 5.0);
        assert_eq!(t.len(), 15);
    }

    proptest! {
        #[test]
        fn strikes_pinned_and_rebuild_is_idempotent(
            strikes in prop::collection::btree_set(50u32..400, 1..8),
            count in 12usize..60,
        ) {
            let strikes: Vec<f64> = strikes.into_iter().map(|k| k as f64 / 100.0).collect();
            let g = build_z_grid(&strikes, 0.1, 6.0, count + strikes.len()).unwrap();
            prop_assert!(g.nodes().windows(2).all(|w| w[1] > w[0]));
            for (k, &i) in strikes.iter().zip(g.anchor_indices()) {
                prop_assert_eq!(g.nodes()[i], *k);
            }
            let again = Grid1D::from_nodes(g.nodes().to_vec(), &strikes).unwrap();
            prop_assert_eq!(again.nodes(), g.nodes());
        }
    }
}
