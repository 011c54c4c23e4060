//! Benchmark fixtures.

use uslv_core::ar_uslv::{ArComponents, JumpCouplingParams, OuParams};
use uslv_core::grids::{build_y_grid, build_z_grid, build_z_grid_2d, AxisSpec};
use uslv_core::lv_calibration::{Deflator, LvModel, LvSpace, SfSlice, SpeedFactorTermStructure};

/// Flat lognormal-style one-factor model on `count` geometric nodes.
pub fn lv_1d(count: usize) -> LvModel {
    let grid = build_z_grid(&[1.0], 1.0 / 40.0, 40.0, count).expect("valid grid");
    let sf = SpeedFactorTermStructure::flat(vec![1.0], 0.36, None).expect("valid speed factors");
    LvModel { space: LvSpace::One(grid), deflator: Deflator::Unit, sf }
}

/// Two-factor model on a `p x p` grid with equal steps starting at 0.1.
pub fn lv_2d(p: usize) -> LvModel {
    let h = 2.0 / p as f64;
    let nodes: Vec<f64> = (0..p).map(|k| 0.1 + h * k as f64).collect();
    let (grid, _) = build_z_grid_2d(&AxisSpec::Nodes(nodes.clone()), &AxisSpec::Nodes(nodes), 1.0, 1.0, 0.3)
        .expect("admissible grid");
    let slice = SfSlice::new(vec![0.6, 1.0, 1.4], vec![0.06, 0.04, 0.03]).expect("valid slice");
    let sf = SpeedFactorTermStructure::new(vec![1.0], vec![slice], Some([0.5, 0.5])).expect("valid speed factors");
    LvModel { space: LvSpace::Two(grid), deflator: Deflator::Unit, sf }
}

/// Activity-rate components with `2 q + 1` levels per activity.
pub fn ar_components(q: usize) -> ArComponents {
    let ou = OuParams { k: [1.0, 1.0], eta: [0.0, 0.0], nu: [0.5, 0.5], rho_y: 0.2 };
    let jumps = JumpCouplingParams { gamma: [0.1, 0.1], q: [0.5, 0.5] };
    let y = build_y_grid(q, 1.0, 1.6).expect("valid activity grid");
    ArComponents::build(&ou, &jumps, [y.clone(), y], [q, q]).expect("valid components")
}
