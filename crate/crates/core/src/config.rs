//! Engine configuration: a sectioned TOML document naming the model flavor,
//! its parameter blocks and the input files, plus builders that turn each
//! section into engine objects. Relative paths resolve against the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ar_uslv::{forward_induction_calibrate, ArCalibration, ArComponents, JumpCouplingParams, OuParams};
use crate::error::{Error, Result};
use crate::grids::{build_theta_grid, build_y_grid, build_z_grid, build_z_grid_2d, AxisSpec, StepAdjustment};
use crate::itc_uslv::{
    constraint_panel, gamma_increment_kernel, gamma_prior, implied_dilaton_process, ConstraintPanel,
    DilatonCalibration, DualOptions, SubordinatorLaw,
};
use crate::lgp_curve::{CurveQuote, LgpParams};
use crate::lv_calibration::{
    calibrate_sf, read_quote_rows, CalibrationOptions, Deflator, FitReport, LvModel, LvSpace, QuoteSet,
    SpeedFactorTermStructure,
};
use crate::markov_generator::split_generator;
use crate::pricing::{EventAction, PayoffSchedule, ScheduleEvent};

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    /// One-factor local volatility.
    Uslv10,
    /// Two-factor local volatility.
    Uslv20,
    /// Activity-rate stochastic local volatility.
    Ar22,
    /// Implied time change.
    Itc22,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub flavor: Flavor,
    pub curve: Option<CurveSection>,
    pub grid: GridSection,
    pub lv: Option<LvSection>,
    pub ar: Option<ArSection>,
    pub itc: Option<ItcSection>,
    pub price: Option<PriceSection>,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(skip)]
    base_dir: PathBuf,
}

/// Rate curve. `params` alone fixes the deflator; with `quotes` it is the
/// starting point of a fit.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveSection {
    pub quotes: Option<PathBuf>,
    pub params: LgpParams,
    pub x_guess: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisSection {
    pub center: Option<f64>,
    pub step: Option<f64>,
    pub count: Option<usize>,
    pub nodes: Option<Vec<f64>>,
}

impl AxisSection {
    fn spec(&self) -> Result<AxisSpec> {
        match (self, &self.nodes) {
            (_, Some(n)) => Ok(AxisSpec::Nodes(n.clone())),
            (Self { center: Some(c), step: Some(s), count: Some(n), .. }, None) => {
                Ok(AxisSpec::Uniform { center: *c, step: *s, count: *n })
            }
            _ => Err(config_err("axis needs `nodes` or `center`, `step` and `count`")),
        }
    }
}

/// One-factor fields (`z_min`, `z_max`, `count`, `strikes`) or two-factor
/// fields (`axis1`, `axis2`, `sigma`, `rho`).
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub z_min: Option<f64>,
    pub z_max: Option<f64>,
    pub count: Option<usize>,
    #[serde(default)]
    pub strikes: Vec<f64>,
    pub axis1: Option<AxisSection>,
    pub axis2: Option<AxisSection>,
    pub sigma: Option<[f64; 2]>,
    pub rho: Option<f64>,
}

/// Speed factors: a saved term structure, a flat level, or a fit to `quotes`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LvSection {
    pub quotes: Option<PathBuf>,
    pub speed_factors: Option<PathBuf>,
    pub flat: Option<f64>,
    pub maturities: Option<Vec<f64>>,
    pub weights: Option<[f64; 2]>,
    #[serde(default = "default_prior")]
    pub prior: f64,
}

fn default_prior() -> f64 {
    0.04
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArSection {
    pub ou: OuParams,
    pub jumps: JumpCouplingParams,
    /// Levels per factor are `2 y_half + 1`.
    pub y_half: usize,
    #[serde(default = "one")]
    pub y_mid: f64,
    pub y_spread: f64,
    pub dt: f64,
    pub horizon: Option<f64>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItcSection {
    pub law: SubordinatorLaw,
    /// Quote file with a `node_time` column.
    pub quotes: PathBuf,
    #[serde(default = "default_theta_count")]
    pub theta_count: usize,
    #[serde(default = "default_theta_std")]
    pub theta_std: f64,
    /// Variance of the gamma prior at the first node.
    #[serde(default = "default_prior_var")]
    pub prior_var: f64,
    /// Mean growth rate and variance rate of the prior increments.
    #[serde(default = "default_kernel_drift")]
    pub kernel_drift: f64,
    #[serde(default = "default_kernel_nu")]
    pub kernel_nu: f64,
}

fn default_theta_count() -> usize {
    15
}
fn default_theta_std() -> f64 {
    0.3
}
fn default_prior_var() -> f64 {
    0.09
}
fn default_kernel_drift() -> f64 {
    0.1
}
fn default_kernel_nu() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Cashflow,
    Exercise,
    KnockOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayoffKind {
    /// Deflated unit cashflow.
    Unit,
    Call,
    Put,
    BondCall,
    BondPut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BarrierSide {
    Up,
    Down,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventSection {
    pub time: f64,
    pub kind: EventKind,
    pub payoff: Option<PayoffKind>,
    pub strike: Option<f64>,
    pub tenor: Option<f64>,
    #[serde(default = "one")]
    pub notional: f64,
    pub barrier: Option<f64>,
    pub side: Option<BarrierSide>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceSection {
    pub events: Vec<EventSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    /// Calibration residual tolerance.
    pub tol: f64,
    /// Poisson truncation tolerance.
    pub eps: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self { tol: 1e-8, eps: 1e-12, max_iter: 100, grad_tol: 1e-11 }
    }
}

impl EngineConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Flavor-required blocks are present and referenced files exist.
    fn check(&self) -> Result<()> {
        let two = !matches!(self.flavor, Flavor::Uslv10);
        if two && (self.grid.axis1.is_none() || self.grid.axis2.is_none()) {
            return Err(config_err("two-factor flavors need grid.axis1 and grid.axis2"));
        }
        if !two && (self.grid.z_min.is_none() || self.grid.z_max.is_none() || self.grid.count.is_none()) {
            return Err(config_err("one-factor flavor needs grid.z_min, grid.z_max and grid.count"));
        }
        let lv = self.lv.as_ref().ok_or_else(|| config_err("missing [lv] section"))?;
        if two && lv.weights.is_none() && lv.speed_factors.is_none() {
            return Err(config_err("two-factor flavors need lv.weights unless a speed-factor file supplies them"));
        }
        if matches!(self.flavor, Flavor::Ar22) && self.ar.is_none() {
            return Err(config_err("flavor ar22 needs an [ar] section"));
        }
        if matches!(self.flavor, Flavor::Itc22) && self.itc.is_none() {
            return Err(config_err("flavor itc22 needs an [itc] section"));
        }
        let mut files: Vec<&PathBuf> = Vec::new();
        files.extend(self.curve.as_ref().and_then(|c| c.quotes.as_ref()));
        files.extend(lv.quotes.as_ref());
        files.extend(lv.speed_factors.as_ref());
        files.extend(self.itc.as_ref().map(|i| &i.quotes));
        for f in files {
            let p = self.resolve(f);
            if !p.is_file() {
                return Err(config_err(format!("referenced file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn lv_section(&self) -> &LvSection {
        self.lv.as_ref().expect("checked on load")
    }

    pub fn deflator(&self) -> Deflator {
        self.curve.as_ref().map_or(Deflator::Unit, |c| Deflator::Lgp(c.params.clone()))
    }

    pub fn calibration_options(&self) -> CalibrationOptions {
        CalibrationOptions { tol: self.solver.tol, eps: self.solver.eps, max_iter: self.solver.max_iter }
    }

    pub fn curve_quotes(&self) -> Result<Vec<CurveQuote>> {
        let c = self.curve.as_ref().ok_or_else(|| config_err("missing [curve] section"))?;
        let path = c.quotes.as_ref().ok_or_else(|| config_err("curve.quotes is required to fit a curve"))?;
        read_curve_quotes(&self.resolve(path))
    }

    /// Driver state space, with the step adjustment made to a uniform axis.
    pub fn space(&self) -> Result<(LvSpace, Option<StepAdjustment>)> {
        let g = &self.grid;
        if matches!(self.flavor, Flavor::Uslv10) {
            let grid = build_z_grid(&g.strikes, g.z_min.unwrap_or(0.0), g.z_max.unwrap_or(0.0), g.count.unwrap_or(0))?;
            return Ok((LvSpace::One(grid), None));
        }
        let [s1, s2] = g.sigma.unwrap_or([1.0, 1.0]);
        let (a1, a2) = (g.axis1.as_ref().expect("checked"), g.axis2.as_ref().expect("checked"));
        let (grid, adj) = build_z_grid_2d(&a1.spec()?, &a2.spec()?, s1, s2, g.rho.unwrap_or(0.0))?;
        Ok((LvSpace::Two(grid), adj))
    }

    pub fn lv_quotes(&self) -> Result<QuoteSet> {
        let path = self.lv_section().quotes.as_ref().ok_or_else(|| config_err("lv.quotes is required"))?;
        QuoteSet::read(&self.resolve(path))
    }

    /// Local-volatility model per the `[lv]` section; the fit report is
    /// returned when the speed factors were calibrated here.
    pub fn lv_model(&self) -> Result<(LvModel, Option<FitReport>)> {
        let lv = self.lv_section();
        let (space, _) = self.space()?;
        let deflator = self.deflator();
        let weights = if matches!(self.flavor, Flavor::Uslv10) { None } else { lv.weights };
        if let Some(path) = &lv.speed_factors {
            let path = self.resolve(path);
            let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
            let sf: SpeedFactorTermStructure = toml::from_str(&text).map_err(|e| config_err(e.to_string()))?;
            let sf = SpeedFactorTermStructure::new(sf.maturities, sf.slices, sf.weights)?;
            return Ok((LvModel { space, deflator, sf }, None));
        }
        if let (Some(v), Some(m)) = (lv.flat, &lv.maturities) {
            let sf = SpeedFactorTermStructure::flat(m.clone(), v, weights)?;
            return Ok((LvModel { space, deflator, sf }, None));
        }
        let quotes = self.lv_quotes()?;
        let prior = SpeedFactorTermStructure::flat(quotes.maturity_times(), lv.prior, weights)?;
        let (sf, report) = calibrate_sf(&space, &deflator, &quotes, &prior, &self.calibration_options())?;
        Ok((LvModel { space, deflator, sf }, Some(report)))
    }

    pub fn ar_calibration(&self, lv: &LvModel) -> Result<ArCalibration> {
        let ar = self.ar.as_ref().ok_or_else(|| config_err("missing [ar] section"))?;
        let y = build_y_grid(ar.y_half, ar.y_mid, ar.y_spread)?;
        let comp = ArComponents::build(&ar.ou, &ar.jumps, [y.clone(), y], [ar.y_half, ar.y_half])?;
        forward_induction_calibrate(lv, &comp, ar.dt, ar.horizon.unwrap_or_else(|| lv.sf.horizon()))
    }

    /// Constraint panel and calibrated dilaton law per the `[itc]` section.
    pub fn itc_calibration(&self, lv: &LvModel) -> Result<(ConstraintPanel, DilatonCalibration)> {
        let itc = self.itc.as_ref().ok_or_else(|| config_err("missing [itc] section"))?;
        let (times, quotes) = read_node_quotes(&self.resolve(&itc.quotes))?;
        let split = split_generator(&lv.interval_generator(0)?)?;
        let p0 = lv.initial_distribution()?;
        let mut payoffs = Vec::with_capacity(times.len());
        let mut targets = Vec::with_capacity(times.len());
        for (&t, qs) in times.iter().zip(&quotes) {
            payoffs.push(qs.iter().map(|q| lv.payoff_vector(t, q)).collect::<Result<Vec<_>>>()?);
            targets.push(qs.iter().map(|q| q.mid).collect());
        }
        let grid = build_theta_grid(1.0, itc.theta_std, itc.theta_count)?;
        let panel = constraint_panel(&times, &payoffs, &targets, &p0, &split, &itc.law, &grid, self.solver.eps)?;
        let first = gamma_prior(&grid, itc.prior_var)?;
        let priors = times
            .windows(2)
            .map(|w| gamma_increment_kernel(&grid, itc.kernel_drift, itc.kernel_nu, w[1] - w[0]))
            .collect::<Result<Vec<_>>>()?;
        let opts = DualOptions { grad_tol: self.solver.grad_tol, ..DualOptions::default() };
        let cal = implied_dilaton_process(&panel, &grid, &first, &priors, &opts)?;
        Ok((panel, cal))
    }

    /// Payoff schedule of the `[price]` section on driver states.
    pub fn schedule(&self, lv: &LvModel) -> Result<PayoffSchedule> {
        let price = self.price.as_ref().ok_or_else(|| config_err("missing [price] section"))?;
        let events = price.events.iter().map(|e| event(lv, e)).collect::<Result<Vec<_>>>()?;
        PayoffSchedule::new(events)
    }
}

fn event(lv: &LvModel, e: &EventSection) -> Result<ScheduleEvent> {
    use crate::lv_calibration::{InstrumentKind, Quote};
    let action = match e.kind {
        EventKind::KnockOut => {
            let (b, side) = e
                .barrier
                .zip(e.side)
                .ok_or_else(|| config_err(format!("knock-out at t = {} needs barrier and side", e.time)))?;
            let obs = lv.space.observable(lv.sf.weights)?;
            EventAction::KnockOut(
                obs.iter()
                    .map(|&u| match side {
                        BarrierSide::Up => u >= b,
                        BarrierSide::Down => u <= b,
                    })
                    .collect(),
            )
        }
        EventKind::Cashflow | EventKind::Exercise => {
            let payoff = e.payoff.ok_or_else(|| config_err(format!("event at t = {} needs a payoff", e.time)))?;
            let strike = || e.strike.ok_or_else(|| config_err(format!("event at t = {} needs a strike", e.time)));
            let tenor = || e.tenor.ok_or_else(|| config_err(format!("event at t = {} needs a tenor", e.time)));
            let v = match payoff {
                PayoffKind::Unit => {
                    let m0 = lv.deflator.value(0.0, &vec![1.0; lv.space.state(0).len()])?;
                    (0..lv.space.len())
                        .map(|k| lv.deflator.value(e.time, &lv.space.state(k)).map(|m| m / m0))
                        .collect::<Result<Vec<_>>>()?
                }
                PayoffKind::Call => lv.payoff_vector(e.time, &Quote::new(strike()?, InstrumentKind::Call, 0.0))?,
                PayoffKind::Put => lv.payoff_vector(e.time, &Quote::new(strike()?, InstrumentKind::Put, 0.0))?,
                PayoffKind::BondCall => {
                    lv.payoff_vector(e.time, &Quote::new(strike()?, InstrumentKind::BondCall { tenor: tenor()? }, 0.0))?
                }
                PayoffKind::BondPut => {
                    lv.payoff_vector(e.time, &Quote::new(strike()?, InstrumentKind::BondPut { tenor: tenor()? }, 0.0))?
                }
            };
            let v = v.into_iter().map(|x| e.notional * x).collect();
            if e.kind == EventKind::Cashflow {
                EventAction::Cashflow(v)
            } else {
                EventAction::Exercise(v)
            }
        }
    };
    Ok(ScheduleEvent { time: e.time, action })
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Deserialize)]
struct CurveRow {
    maturity_years: f64,
    zero_yield: f64,
}

/// Zero-yield quotes from a delimited file with `maturity_years,zero_yield`.
pub fn read_curve_quotes(path: &Path) -> Result<Vec<CurveQuote>> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    rdr.deserialize::<CurveRow>()
        .map(|r| {
            let r = r.map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
            Ok(CurveQuote { maturity: r.maturity_years, zero_yield: r.zero_yield })
        })
        .collect()
}

/// Per-node quotes. A missing node time defaults to the option maturity; a
/// node time different from the maturity is rejected.
pub fn read_node_quotes(path: &Path) -> Result<(Vec<f64>, Vec<Vec<crate::lv_calibration::Quote>>)> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let rows = read_quote_rows(file)?;
    let mut times: Vec<f64> = Vec::new();
    let mut quotes: Vec<Vec<crate::lv_calibration::Quote>> = Vec::new();
    for r in rows {
        let t = r.node_time.unwrap_or(r.maturity_years);
        if (t - r.maturity_years).abs() > 1e-12 * t.max(1.0) {
            return Err(Error::InvalidInput(format!(
                "quote with maturity {} listed at node {t}; node quotes must mature at their node",
                r.maturity_years
            )));
        }
        let q = r.quote()?;
        match times.iter().position(|&x| (x - t).abs() <= 1e-12 * t.max(1.0)) {
            Some(k) => quotes[k].push(q),
            None => {
                times.push(t);
                quotes.push(vec![q]);
            }
        }
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidInput("node times must be listed in increasing order".into()));
    }
    Ok((times, quotes))
}
