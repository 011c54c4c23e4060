//! Backward induction over calibrated chains.
//!
//! Every chain is cut at its event times into interval operators `T` acting
//! on distributions from the left (`p T`) and on value vectors from the right
//! (`T v`). Values run backward from the last event; events at one time are
//! applied in reverse listed order, so the first listed acts last.

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::ar_uslv::ArCalibration;
use crate::error::{invalid, Result};
use crate::itc_uslv::{dilated_generator, DilatonLaw, SubordinatorLaw};
use crate::lv_calibration::LvModel;
use crate::markov_generator::GeneratorSplit;
use crate::sparse::SparseGenerator;
use crate::transient_probability::{
    poisson_weights, time_changed_weights, uniformize, TimeChangeLaw, UniformizedChain, ORACLE_MAX_STATES,
};

/// Transition operator between two cut times.
pub trait IntervalOperator {
    fn dim(&self) -> usize;
    /// `p T`.
    fn forward(&self, p: &[f64]) -> Result<Vec<f64>>;
    /// `T v`.
    fn backward(&self, v: &[f64]) -> Result<Vec<f64>>;
}

fn check_len(x: &[f64], n: usize) -> Result<()> {
    if x.len() != n {
        return Err(invalid(format!("vector of length {} applied to a {n}-state operator", x.len())));
    }
    Ok(())
}

/// `sum_n w_n P^n` of a uniformized chain; the identity for a chain without moves.
#[derive(Debug, Clone)]
pub struct UniformizedStep {
    dim: usize,
    chain: Option<UniformizedChain>,
    weights: Vec<f64>,
}

impl UniformizedStep {
    /// `exp(dt A)`, truncated where the Poisson tail falls below `eps`.
    pub fn new(g: &SparseGenerator, dt: f64, eps: f64) -> Result<Self> {
        Self::build(g, dt, |lambda| poisson_weights(lambda * dt, eps).map(|w| w.0))
    }

    /// `E[exp(T_dt A)]` for the random clock `law`.
    pub fn time_changed(g: &SparseGenerator, law: &dyn TimeChangeLaw, dt: f64, eps: f64) -> Result<Self> {
        Self::build(g, dt, |lambda| time_changed_weights(law, lambda, dt, eps))
    }

    fn build(g: &SparseGenerator, dt: f64, weights: impl FnOnce(f64) -> Result<Vec<f64>>) -> Result<Self> {
        if !(dt >= 0.0) {
            return Err(invalid(format!("interval length {dt} must be non-negative")));
        }
        let dim = g.dim();
        if dt == 0.0 || g.max_exit_rate() == 0.0 {
            return Ok(Self { dim, chain: None, weights: vec![1.0] });
        }
        let chain = uniformize(g, crate::transient_probability::DEFAULT_SAFETY)?;
        let weights = weights(chain.lambda)?;
        Ok(Self { dim, chain: Some(chain), weights })
    }
}

impl IntervalOperator for UniformizedStep {
    fn dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, p: &[f64]) -> Result<Vec<f64>> {
        check_len(p, self.dim)?;
        Ok(match &self.chain {
            Some(c) => c.mix_forward(p, &self.weights),
            None => p.to_vec(),
        })
    }

    fn backward(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len(v, self.dim)?;
        Ok(match &self.chain {
            Some(c) => c.mix_backward(v, &self.weights),
            None => v.to_vec(),
        })
    }
}

/// Dense `exp(dt A)`, the in-situ oracle for small chains.
#[derive(Debug, Clone)]
pub struct DenseStep {
    matrix: DMatrix<f64>,
}

impl DenseStep {
    pub fn new(g: &SparseGenerator, dt: f64) -> Result<Self> {
        if g.dim() > ORACLE_MAX_STATES {
            return Err(invalid(format!("dense oracle limited to {ORACLE_MAX_STATES} states, got {}", g.dim())));
        }
        Ok(Self { matrix: (g.to_dense() * dt).exp() })
    }
}

impl IntervalOperator for DenseStep {
    fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn forward(&self, p: &[f64]) -> Result<Vec<f64>> {
        check_len(p, self.dim())?;
        Ok((RowDVector::from_row_slice(p) * &self.matrix).iter().copied().collect())
    }

    fn backward(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len(v, self.dim())?;
        Ok((&self.matrix * DVector::from_column_slice(v)).iter().copied().collect())
    }
}

/// Consecutive explicit steps `first..end` of an activity-rate calibration.
#[derive(Debug, Clone, Copy)]
pub struct ArStepRange<'a> {
    pub cal: &'a ArCalibration,
    pub first: usize,
    pub end: usize,
}

impl IntervalOperator for ArStepRange<'_> {
    fn dim(&self) -> usize {
        self.cal.initial.len()
    }

    fn forward(&self, p: &[f64]) -> Result<Vec<f64>> {
        check_len(p, self.dim())?;
        (self.first..self.end).try_fold(p.to_vec(), |pi, n| self.cal.forward(n, &pi))
    }

    fn backward(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len(v, self.dim())?;
        (self.first..self.end).rev().try_fold(v.to_vec(), |u, n| self.cal.backward(n, &u))
    }
}

/// Operators applied in sequence.
pub struct Composite<'a> {
    pub parts: Vec<Box<dyn IntervalOperator + 'a>>,
}

impl IntervalOperator for Composite<'_> {
    fn dim(&self) -> usize {
        self.parts.first().map_or(0, |p| p.dim())
    }

    fn forward(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.parts.iter().try_fold(p.to_vec(), |x, op| op.forward(&x))
    }

    fn backward(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.parts.iter().rev().try_fold(v.to_vec(), |x, op| op.backward(&x))
    }
}

/// What happens to the value vector at an event, on driver states.
#[derive(Debug, Clone, PartialEq)]
pub enum EventAction {
    /// `v + c`.
    Cashflow(Vec<f64>),
    /// `max(v, c)` nodewise.
    Exercise(Vec<f64>),
    /// `v = 0` where the mask is set.
    KnockOut(Vec<bool>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleEvent {
    pub time: f64,
    pub action: EventAction,
}

/// Events in non-decreasing time order; payoffs are deflated and finite.
#[derive(Debug, Clone, PartialEq)]
pub struct PayoffSchedule {
    events: Vec<ScheduleEvent>,
}

impl PayoffSchedule {
    pub fn new(events: Vec<ScheduleEvent>) -> Result<Self> {
        if events.is_empty() {
            return Err(invalid("payoff schedule has no events"));
        }
        if let Some(e) = events.iter().find(|e| !(e.time >= 0.0 && e.time.is_finite())) {
            return Err(invalid(format!("event time {} must be finite and non-negative", e.time)));
        }
        if let Some(w) = events.windows(2).find(|w| w[1].time < w[0].time) {
            return Err(invalid(format!("event at t = {} listed after t = {}", w[1].time, w[0].time)));
        }
        for e in &events {
            let finite = match &e.action {
                EventAction::Cashflow(c) | EventAction::Exercise(c) => c.iter().all(|x| x.is_finite()),
                EventAction::KnockOut(_) => true,
            };
            if !finite {
                return Err(invalid(format!("payoff at t = {} is not finite on every state", e.time)));
            }
        }
        Ok(Self { events })
    }

    pub fn events(&self) -> &[ScheduleEvent] {
        &self.events
    }

    pub fn last_time(&self) -> f64 {
        self.events.last().map_or(0.0, |e| e.time)
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        for e in &self.events {
            let len = match &e.action {
                EventAction::Cashflow(c) | EventAction::Exercise(c) => c.len(),
                EventAction::KnockOut(m) => m.len(),
            };
            if len != n {
                return Err(invalid(format!("event at t = {} has {len} entries for {n} states", e.time)));
            }
        }
        Ok(())
    }
}

/// Value at the initial state and at every state at time zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceResult {
    pub value: f64,
    pub surface: Vec<f64>,
}

/// Calibrated chain to price on. Schedules are given on driver states.
#[derive(Debug, Clone, Copy)]
pub enum PricingModel<'a> {
    /// Local-volatility chain with piecewise-constant generators.
    Lv(&'a LvModel),
    /// Activity-rate chain: driver states lifted over activity states.
    Ar(&'a ArCalibration),
    /// Per-dilaton chains `theta a1 + a2` on the clock `law`, mixed over the
    /// dilaton marginal at the last event.
    Itc { split: &'a GeneratorSplit, p0: &'a [f64], law: SubordinatorLaw, dilaton: &'a DilatonLaw },
}

#[derive(Debug, Clone, Copy)]
pub struct PricingOptions {
    pub eps: f64,
    /// Dense matrix exponentials instead of uniformization.
    pub oracle: bool,
}

impl Default for PricingOptions {
    fn default() -> Self {
        Self { eps: 1e-14, oracle: false }
    }
}

/// Relative tolerance for matching event times to cut points.
const TIME_TOL: f64 = 1e-12;

fn same_time(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIME_TOL * a.abs().max(b.abs()).max(1.0)
}

impl PricingModel<'_> {
    pub fn horizon(&self) -> f64 {
        match self {
            Self::Lv(m) => m.sf.horizon(),
            Self::Ar(c) => c.horizon(),
            Self::Itc { dilaton, .. } => dilaton.node_times.last().copied().unwrap_or(0.0),
        }
    }

    /// Driver state count.
    pub fn driver_dim(&self) -> usize {
        match self {
            Self::Lv(m) => m.space.len(),
            Self::Ar(c) => c.initial.len() / c.n_alpha(),
            Self::Itc { p0, .. } => p0.len(),
        }
    }

    fn check_horizon(&self, schedule: &PayoffSchedule) -> Result<()> {
        let h = self.horizon();
        if let Some(e) = schedule.events.iter().find(|e| e.time > h && !same_time(e.time, h)) {
            return Err(invalid(format!("event at t = {} lies beyond the calibrated horizon {h}", e.time)));
        }
        Ok(())
    }
}

/// Sorted distinct cut times from zero through `extra` and the event times.
fn cut_times(schedule: &PayoffSchedule, extra: &[f64]) -> Vec<f64> {
    let last = schedule.last_time();
    let mut cuts = vec![0.0];
    let mut all: Vec<f64> = schedule.events.iter().map(|e| e.time).collect();
    all.extend(extra.iter().copied().filter(|&t| t < last));
    all.sort_by(f64::total_cmp);
    for t in all {
        if !same_time(t, *cuts.last().expect("non-empty")) {
            cuts.push(t);
        }
    }
    cuts
}

/// Interval operators between consecutive cuts of a local-volatility chain.
fn lv_operators<'a>(
    model: &'a LvModel,
    cuts: &[f64],
    opts: &PricingOptions,
) -> Result<Vec<Box<dyn IntervalOperator + 'a>>> {
    let mut gens: Vec<Option<SparseGenerator>> = vec![None; model.sf.maturities.len()];
    let mut ops: Vec<Box<dyn IntervalOperator + 'a>> = Vec::with_capacity(cuts.len());
    for w in cuts.windows(2) {
        let k = model.sf.interval(w[1].min(model.sf.horizon()))?;
        if gens[k].is_none() {
            gens[k] = Some(model.interval_generator(k)?);
        }
        let g = gens[k].as_ref().expect("built above");
        ops.push(step_operator(g, w[1] - w[0], opts)?);
    }
    Ok(ops)
}

fn step_operator<'a>(g: &SparseGenerator, dt: f64, opts: &PricingOptions) -> Result<Box<dyn IntervalOperator + 'a>> {
    Ok(if opts.oracle { Box::new(DenseStep::new(g, dt)?) } else { Box::new(UniformizedStep::new(g, dt, opts.eps)?) })
}

/// Activity-rate operators; every cut must sit on a step boundary.
fn ar_operators<'a>(cal: &'a ArCalibration, cuts: &[f64]) -> Result<Vec<Box<dyn IntervalOperator + 'a>>> {
    let mut bounds = vec![0.0];
    bounds.extend(cal.steps.iter().map(|s| s.t0 + s.dt));
    let index = |t: f64| -> Result<usize> {
        bounds
            .iter()
            .position(|&b| same_time(b, t))
            .ok_or_else(|| invalid(format!("event at t = {t} is not on a step boundary of the calibrated chain")))
    };
    cuts.windows(2)
        .map(|w| Ok(Box::new(ArStepRange { cal, first: index(w[0])?, end: index(w[1])? }) as Box<dyn IntervalOperator>))
        .collect()
}

/// Runs values backward through `ops` between `cuts`, applying events.
fn induct(
    ops: &[Box<dyn IntervalOperator + '_>],
    cuts: &[f64],
    schedule: &PayoffSchedule,
    lift: &dyn Fn(&EventAction) -> EventAction,
) -> Result<Vec<f64>> {
    let dim = ops.first().map_or_else(|| lift_dim(schedule, lift), |o| o.dim());
    let mut v = vec![0.0; dim];
    let mut events = schedule.events.iter().rev().peekable();
    for i in (0..cuts.len()).rev() {
        while let Some(e) = events.next_if(|e| same_time(e.time, cuts[i])) {
            apply(&mut v, &lift(&e.action));
        }
        if i > 0 {
            v = ops[i - 1].backward(&v)?;
        }
    }
    Ok(v)
}

fn lift_dim(schedule: &PayoffSchedule, lift: &dyn Fn(&EventAction) -> EventAction) -> usize {
    match lift(&schedule.events[0].action) {
        EventAction::Cashflow(c) | EventAction::Exercise(c) => c.len(),
        EventAction::KnockOut(m) => m.len(),
    }
}

fn apply(v: &mut [f64], action: &EventAction) {
    match action {
        EventAction::Cashflow(c) => v.iter_mut().zip(c).for_each(|(x, c)| *x += c),
        EventAction::Exercise(c) => v.iter_mut().zip(c).for_each(|(x, c)| *x = x.max(*c)),
        EventAction::KnockOut(m) => v.iter_mut().zip(m).filter(|(_, m)| **m).for_each(|(x, _)| *x = 0.0),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Value of `schedule` on `model`, with the value surface at time zero.
pub fn backward_induction_price(
    model: &PricingModel<'_>,
    schedule: &PayoffSchedule,
    opts: &PricingOptions,
) -> Result<PriceResult> {
    schedule.check_dim(model.driver_dim())?;
    model.check_horizon(schedule)?;
    let same = |a: &EventAction| a.clone();
    match *model {
        PricingModel::Lv(m) => {
            let cuts = cut_times(schedule, &m.sf.maturities);
            let ops = lv_operators(m, &cuts, opts)?;
            let surface = induct(&ops, &cuts, schedule, &same)?;
            Ok(PriceResult { value: dot(&m.initial_distribution()?, &surface), surface })
        }
        PricingModel::Ar(cal) => {
            if opts.oracle {
                return Err(invalid("the dense oracle does not apply to explicit activity-rate steps"));
            }
            let cuts = cut_times(schedule, &[]);
            let ops = ar_operators(cal, &cuts)?;
            let na = cal.n_alpha();
            let lift = |a: &EventAction| match a {
                EventAction::Cashflow(c) => EventAction::Cashflow(cal.lift(c)),
                EventAction::Exercise(c) => EventAction::Exercise(cal.lift(c)),
                EventAction::KnockOut(m) => {
                    EventAction::KnockOut(m.iter().flat_map(|b| std::iter::repeat_n(*b, na)).collect())
                }
            };
            let surface = induct(&ops, &cuts, schedule, &lift)?;
            Ok(PriceResult { value: dot(&cal.initial, &surface), surface })
        }
        PricingModel::Itc { split, p0, law, dilaton } => {
            if opts.oracle && !matches!(law, SubordinatorLaw::Deterministic) {
                return Err(invalid("the dense oracle supports calendar clocks only"));
            }
            let cuts = cut_times(schedule, &[]);
            let weights = dilaton.marginal_at(schedule.last_time());
            let mut surface = vec![0.0; p0.len()];
            for (&theta, &w) in dilaton.theta_grid.nodes.iter().zip(weights) {
                if w == 0.0 {
                    continue;
                }
                let g = dilated_generator(split, theta)?;
                let ops =
                    cuts.windows(2).map(|c| itc_operator(&g, &law, c[1] - c[0], opts)).collect::<Result<Vec<_>>>()?;
                let v = induct(&ops, &cuts, schedule, &same)?;
                surface.iter_mut().zip(&v).for_each(|(s, x)| *s += w * x);
            }
            Ok(PriceResult { value: dot(p0, &surface), surface })
        }
    }
}

/// Interval operator of one dilaton-conditional chain.
pub fn itc_operator<'a>(
    g: &SparseGenerator,
    law: &SubordinatorLaw,
    dt: f64,
    opts: &PricingOptions,
) -> Result<Box<dyn IntervalOperator + 'a>> {
    if matches!(law, SubordinatorLaw::Deterministic) {
        return step_operator(g, dt, opts);
    }
    Ok(Box::new(UniformizedStep::time_changed(g, law, dt, opts.eps)?))
}

/// Distribution at the last event time, pushed forward through the same
/// operators the backward pass uses.
pub fn forward_distribution(model: &PricingModel<'_>, t: f64, opts: &PricingOptions) -> Result<Vec<f64>> {
    let probe = PayoffSchedule::new(vec![ScheduleEvent {
        time: t,
        action: EventAction::Cashflow(vec![0.0; model.driver_dim()]),
    }])?;
    model.check_horizon(&probe)?;
    match *model {
        PricingModel::Lv(m) => {
            let cuts = cut_times(&probe, &m.sf.maturities);
            let ops = lv_operators(m, &cuts, opts)?;
            ops.iter().try_fold(m.initial_distribution()?, |p, op| op.forward(&p))
        }
        PricingModel::Ar(cal) => {
            let cuts = cut_times(&probe, &[]);
            let ops = ar_operators(cal, &cuts)?;
            ops.iter().try_fold(cal.initial.clone(), |p, op| op.forward(&p))
        }
        PricingModel::Itc { split, p0, law, dilaton } => {
            let weights = dilaton.marginal_at(t);
            let mut out = vec![0.0; p0.len()];
            for (&theta, &w) in dilaton.theta_grid.nodes.iter().zip(weights) {
                if w == 0.0 {
                    continue;
                }
                let op = itc_operator(&dilated_generator(split, theta)?, &law, t, opts)?;
                let p = op.forward(p0)?;
                out.iter_mut().zip(&p).for_each(|(o, x)| *o += w * x);
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grids::build_z_grid;
    use crate::lv_calibration::{Deflator, InstrumentKind, LvSpace, Quote, SpeedFactorTermStructure};
    use crate::sparse::strategies::chain_instance;
    use crate::sparse::Structure;
    use crate::transient_probability::transient_distribution;
    use proptest::prelude::*;

    fn model(deflator: Deflator) -> LvModel {
        let grid = build_z_grid(&[1.0], 0.3, 3.0, 41).unwrap();
        let sf = SpeedFactorTermStructure::flat(vec![0.5, 1.0], 0.3, None).unwrap();
        LvModel { space: LvSpace::One(grid), deflator, sf }
    }

    fn european(m: &LvModel, t: f64, quote: &Quote) -> PayoffSchedule {
        let v = m.payoff_vector(t, quote).unwrap();
        PayoffSchedule::new(vec![ScheduleEvent { time: t, action: EventAction::Cashflow(v) }]).unwrap()
    }

    #[test]
    fn unit_payoff_without_rates_is_one() {
        let m = model(Deflator::Unit);
        let s = PayoffSchedule::new(vec![ScheduleEvent {
            time: 0.8,
            action: EventAction::Cashflow(vec![1.0; m.space.len()]),
        }])
        .unwrap();
        let r = backward_induction_price(&PricingModel::Lv(&m), &s, &PricingOptions::default()).unwrap();
        assert!((r.value - 1.0).abs() < 1e-12, "{}", r.value);
    }

    #[test]
    fn backward_matches_forward_distribution() {
        let m = model(Deflator::Unit);
        let q = Quote::new(1.1, InstrumentKind::Call, 0.0);
        let r = backward_induction_price(&PricingModel::Lv(&m), &european(&m, 0.75, &q), &PricingOptions::default())
            .unwrap();
        let p = m.distribution_at(0.75, 1e-12).unwrap();
        assert!((r.value - m.price(&p, 0.75, &q).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn oracle_agrees_with_uniformization() {
        let m = model(Deflator::Unit);
        let q = Quote::new(0.9, InstrumentKind::Put, 0.0);
        let s = european(&m, 1.0, &q);
        let a = backward_induction_price(&PricingModel::Lv(&m), &s, &PricingOptions::default()).unwrap();
        let b =
            backward_induction_price(&PricingModel::Lv(&m), &s, &PricingOptions { oracle: true, ..Default::default() })
                .unwrap();
        assert!((a.value - b.value).abs() < 1e-10);
    }

    #[test]
    fn early_exercise_dominates_european() {
        let m = model(Deflator::Unit);
        let q = Quote::new(1.0, InstrumentKind::Put, 0.0);
        let mut events: Vec<ScheduleEvent> = (1..=4)
            .map(|k| {
                let t = 0.25 * k as f64;
                ScheduleEvent { time: t, action: EventAction::Exercise(m.payoff_vector(t, &q).unwrap()) }
            })
            .collect();
        let american = PayoffSchedule::new(events.clone()).unwrap();
        let last = events.pop().unwrap();
        let euro = PayoffSchedule::new(vec![last]).unwrap();
        let a = backward_induction_price(&PricingModel::Lv(&m), &american, &PricingOptions::default()).unwrap();
        let e = backward_induction_price(&PricingModel::Lv(&m), &euro, &PricingOptions::default()).unwrap();
        assert!(a.surface.iter().zip(&e.surface).all(|(x, y)| *x >= *y - 1e-15));
        assert!(a.value > e.value);
    }

    #[test]
    fn schedule_past_horizon_names_time() {
        let m = model(Deflator::Unit);
        let s = PayoffSchedule::new(vec![ScheduleEvent {
            time: 1.5,
            action: EventAction::Cashflow(vec![1.0; m.space.len()]),
        }])
        .unwrap();
        let err = backward_induction_price(&PricingModel::Lv(&m), &s, &PricingOptions::default()).unwrap_err();
        assert!(err.to_string().contains("1.5"));
    }

    #[test]
    fn knock_out_then_cashflow_order() {
        let m = model(Deflator::Unit);
        let n = m.space.len();
        let mask = vec![true; n];
        // Listed first acts last: the cashflow survives the knock-out listed after it.
        let s = PayoffSchedule::new(vec![
            ScheduleEvent { time: 0.5, action: EventAction::Cashflow(vec![1.0; n]) },
            ScheduleEvent { time: 0.5, action: EventAction::KnockOut(mask) },
        ])
        .unwrap();
        let r = backward_induction_price(&PricingModel::Lv(&m), &s, &PricingOptions::default()).unwrap();
        assert!((r.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniformized_step_adjoint() {
        let g = SparseGenerator::from_triplets(
            3,
            vec![(0, 0, -1.0), (0, 1, 1.0), (1, 0, 0.5), (1, 1, -1.5), (1, 2, 1.0), (2, 1, 2.0), (2, 2, -2.0)],
            Structure::Tridiagonal,
        )
        .unwrap();
        let op = UniformizedStep::new(&g, 0.7, 1e-12).unwrap();
        let p = [0.2, 0.5, 0.3];
        let v = [1.0, -2.0, 0.5];
        let lhs = dot(&p, &op.backward(&v).unwrap());
        let rhs = dot(&op.forward(&p).unwrap(), &v);
        assert!((lhs - rhs).abs() < 1e-14);
        let direct = transient_distribution(&p, &g, 0.7, 1e-12).unwrap().probabilities;
        let via = op.forward(&p).unwrap();
        assert!(direct.iter().zip(&via).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn interval_operators_are_adjoint((g, p, t) in chain_instance(), seed in prop::collection::vec(-1.0f64..1.0, 30)) {
            let v: Vec<f64> = seed.iter().cycle().take(g.dim()).copied().collect();
            let ops: [Box<dyn IntervalOperator>; 2] =
                [Box::new(UniformizedStep::new(&g, t, 1e-14).unwrap()), Box::new(DenseStep::new(&g, t).unwrap())];
            for op in ops {
                let lhs: f64 = p.iter().zip(op.backward(&v).unwrap()).map(|(a, b)| a * b).sum();
                let rhs: f64 = op.forward(&p).unwrap().iter().zip(&v).map(|(a, b)| a * b).sum();
                prop_assert!((lhs - rhs).abs() < 1e-12);
            }
        }
    }
}
