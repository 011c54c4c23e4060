//! Nonparametric speed factors calibrated to vanilla quotes.
//!
//! A speed-factor term structure holds one piecewise-linear slice per maturity
//! interval `(T_{k-1}, T_k]`. Slices are fitted one maturity at a time against
//! prices computed from chained transient distributions, so earlier slices are
//! never touched by later fits.

use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grids::{Grid1D, Grid2D};
use crate::lgp_curve::LgpParams;
use crate::markov_generator::{generator_1d, generator_2d_nonuniform, generator_2d_uniform, CrossStencil};
use crate::optim::{least_squares, LsqOptions};
use crate::sparse::SparseGenerator;
use crate::transient_probability::transient_distribution;

/// Anchored piecewise-linear function with flat extrapolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SfSlice {
    pub anchors: Vec<f64>,
    pub values: Vec<f64>,
}

impl SfSlice {
    pub fn new(anchors: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if anchors.is_empty() || anchors.len() != values.len() {
            return Err(invalid("a slice needs matching, non-empty anchors and values"));
        }
        if anchors.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("slice anchors must be strictly increasing"));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(invalid(format!("speed factor anchor {v} must be finite and non-negative")));
        }
        Ok(Self { anchors, values })
    }

    pub fn flat(value: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![value])
    }

    pub fn eval(&self, u: f64) -> f64 {
        let (a, v) = (&self.anchors, &self.values);
        let k = a.partition_point(|&x| x <= u);
        if k == 0 {
            return v[0];
        }
        if k == a.len() {
            return v[k - 1];
        }
        if u == a[k - 1] {
            return v[k - 1];
        }
        let w = (u - a[k - 1]) / (a[k] - a[k - 1]);
        v[k - 1] + w * (v[k] - v[k - 1])
    }
}

/// Speed factors piecewise constant in time: slice `k` applies on `(T_{k-1}, T_k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedFactorTermStructure {
    pub maturities: Vec<f64>,
    pub slices: Vec<SfSlice>,
    /// Composition weights `(alpha_1, alpha_2)` for two-factor evaluation.
    pub weights: Option<[f64; 2]>,
}

impl SpeedFactorTermStructure {
    pub fn new(maturities: Vec<f64>, slices: Vec<SfSlice>, weights: Option<[f64; 2]>) -> Result<Self> {
        if maturities.is_empty() || maturities.len() != slices.len() {
            return Err(invalid("one slice per maturity is required"));
        }
        if !(maturities[0] > 0.0) || maturities.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("maturities must be positive and strictly increasing"));
        }
        if let Some(w) = weights {
            if !(w[0] >= 0.0 && w[1] >= 0.0) {
                return Err(invalid("composition weights must be non-negative"));
            }
        }
        Ok(Self { maturities, slices, weights })
    }

    pub fn flat(maturities: Vec<f64>, value: f64, weights: Option<[f64; 2]>) -> Result<Self> {
        let slices = maturities.iter().map(|_| SfSlice::flat(value)).collect::<Result<Vec<_>>>()?;
        Self::new(maturities, slices, weights)
    }

    pub fn horizon(&self) -> f64 {
        *self.maturities.last().expect("non-empty")
    }

    /// Index of the interval containing `t`; `t = 0` belongs to the first.
    pub fn interval(&self, t: f64) -> Result<usize> {
        if !(t >= 0.0) {
            return Err(invalid(format!("time {t} must be non-negative")));
        }
        let k = self.maturities.partition_point(|&m| m < t);
        if k == self.maturities.len() {
            return Err(invalid(format!("time {t} beyond last maturity {}", self.horizon())));
        }
        Ok(k)
    }

    pub fn eval(&self, z: f64, t: f64) -> Result<f64> {
        Ok(self.slices[self.interval(t)?].eval(z))
    }

    pub fn eval_2d(&self, z1: f64, z2: f64, t: f64) -> Result<f64> {
        let w = self.weights.ok_or_else(|| invalid("two-factor evaluation needs composition weights"))?;
        self.eval(w[0] * z1 + w[1] * z2, t)
    }
}

/// Instrument on an observable affine in the driver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InstrumentKind {
    Call,
    Put,
    /// Option to buy the zero bond maturing `tenor` years after expiry.
    BondCall {
        tenor: f64,
    },
    BondPut {
        tenor: f64,
    },
}

impl InstrumentKind {
    fn is_call(&self) -> bool {
        matches!(self, Self::Call | Self::BondCall { .. })
    }

    fn family(&self) -> (u8, u64) {
        match self {
            Self::Call => (0, 0),
            Self::Put => (1, 0),
            Self::BondCall { tenor } => (2, tenor.to_bits()),
            Self::BondPut { tenor } => (3, tenor.to_bits()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Call => "call".into(),
            Self::Put => "put".into(),
            Self::BondCall { tenor } => format!("bond_call:{tenor}"),
            Self::BondPut { tenor } => format!("bond_put:{tenor}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quote {
    pub strike: f64,
    pub kind: InstrumentKind,
    pub mid: f64,
    pub bid: Option<f64>,
    pub ask: Option<f64>,
    /// Inactive quotes carry no anchor and no residual.
    pub active: bool,
}

impl Quote {
    pub fn new(strike: f64, kind: InstrumentKind, mid: f64) -> Self {
        Self { strike, kind, mid, bid: None, ask: None, active: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaturityQuotes {
    pub maturity: f64,
    pub quotes: Vec<Quote>,
}

/// Quotes grouped by maturity, checked for static arbitrage on construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuoteSet {
    maturities: Vec<MaturityQuotes>,
}

/// Relative slack in the monotonicity and convexity checks.
const ARBITRAGE_SLACK: f64 = 1e-12;

impl QuoteSet {
    pub fn new(mut maturities: Vec<MaturityQuotes>) -> Result<Self> {
        if maturities.is_empty() {
            return Err(invalid("quote set is empty"));
        }
        if !(maturities[0].maturity > 0.0) || maturities.windows(2).any(|w| !(w[1].maturity > w[0].maturity)) {
            return Err(invalid("quote maturities must be positive and strictly increasing"));
        }
        for m in &mut maturities {
            check_maturity(m)?;
            m.quotes.sort_by(|a, b| a.strike.total_cmp(&b.strike));
        }
        Ok(Self { maturities })
    }

    pub fn maturities(&self) -> &[MaturityQuotes] {
        &self.maturities
    }

    pub fn maturity_times(&self) -> Vec<f64> {
        self.maturities.iter().map(|m| m.maturity).collect()
    }

    /// Reads `maturity_years, strike_z, kind, mid` with optional `bid`, `ask`,
    /// `active` and `tenor` columns. `kind` is one of `call`, `put`,
    /// `bond_call`, `bond_put`; bond kinds need `tenor`.
    pub fn from_csv(reader: impl Read) -> Result<Self> {
        let rows = read_quote_rows(reader)?;
        let mut out: Vec<MaturityQuotes> = Vec::new();
        for row in rows {
            let q = row.quote()?;
            match out.iter_mut().find(|m| m.maturity == row.maturity_years) {
                Some(m) => m.quotes.push(q),
                None => out.push(MaturityQuotes { maturity: row.maturity_years, quotes: vec![q] }),
            }
        }
        out.sort_by(|a, b| a.maturity.total_cmp(&b.maturity));
        Self::new(out)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
        Self::from_csv(f)
    }

    pub fn write_csv(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        writeln!(w, "maturity_years,strike_z,kind,mid,active,tenor")?;
        for m in &self.maturities {
            for q in &m.quotes {
                let (kind, tenor) = match q.kind {
                    InstrumentKind::Call => ("call", String::new()),
                    InstrumentKind::Put => ("put", String::new()),
                    InstrumentKind::BondCall { tenor } => ("bond_call", format!("{tenor}")),
                    InstrumentKind::BondPut { tenor } => ("bond_put", format!("{tenor}")),
                };
                writeln!(w, "{},{},{kind},{:.17e},{},{tenor}", m.maturity, q.strike, q.mid, q.active)?;
            }
        }
        Ok(())
    }
}

/// One delimited quote record. Shared with the per-node dilaton quote files.
#[derive(Debug, Clone, Deserialize)]
pub(crate) struct QuoteRow {
    #[serde(default)]
    pub node_time: Option<f64>,
    pub maturity_years: f64,
    pub strike_z: f64,
    pub kind: String,
    pub mid: f64,
    #[serde(default)]
    pub bid: Option<f64>,
    #[serde(default)]
    pub ask: Option<f64>,
    #[serde(default)]
    pub active: Option<bool>,
    #[serde(default)]
    pub tenor: Option<f64>,
}

impl QuoteRow {
    pub fn quote(&self) -> Result<Quote> {
        let tenor = || self.tenor.ok_or_else(|| invalid(format!("{} quote needs a tenor", self.kind)));
        let kind = match self.kind.trim() {
            "call" => InstrumentKind::Call,
            "put" => InstrumentKind::Put,
            "bond_call" => InstrumentKind::BondCall { tenor: tenor()? },
            "bond_put" => InstrumentKind::BondPut { tenor: tenor()? },
            other => return Err(invalid(format!("unknown instrument kind '{other}'"))),
        };
        Ok(Quote {
            strike: self.strike_z,
            kind,
            mid: self.mid,
            bid: self.bid,
            ask: self.ask,
            active: self.active.unwrap_or(true),
        })
    }
}

pub(crate) fn read_quote_rows(reader: impl Read) -> Result<Vec<QuoteRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    rdr.deserialize().map(|r| r.map_err(|e| invalid(format!("quote file: {e}")))).collect()
}

fn check_maturity(m: &MaturityQuotes) -> Result<()> {
    let t = m.maturity;
    for q in &m.quotes {
        if !(q.mid > 0.0) || !q.mid.is_finite() {
            return Err(invalid(format!("price {} at T = {t}, K = {} must be positive", q.mid, q.strike)));
        }
        if !q.strike.is_finite() {
            return Err(invalid(format!("strike {} at T = {t} is not finite", q.strike)));
        }
        if let InstrumentKind::BondCall { tenor } | InstrumentKind::BondPut { tenor } = q.kind {
            if !(tenor > 0.0) {
                return Err(invalid(format!("bond tenor {tenor} must be positive")));
            }
        }
        if q.bid.is_some_and(|b| b > q.mid) || q.ask.is_some_and(|a| a < q.mid) {
            return Err(invalid(format!("mid outside bid/ask at T = {t}, K = {}", q.strike)));
        }
    }
    let mut strikes: Vec<f64> = m.quotes.iter().map(|q| q.strike).collect();
    strikes.sort_by(f64::total_cmp);
    if strikes.windows(2).any(|w| w[0] == w[1]) {
        return Err(invalid(format!("duplicate strike at T = {t}")));
    }
    let mut families: Vec<(u8, u64)> = m.quotes.iter().map(|q| q.kind.family()).collect();
    families.sort();
    families.dedup();
    for fam in families {
        let mut qs: Vec<&Quote> = m.quotes.iter().filter(|q| q.kind.family() == fam).collect();
        qs.sort_by(|a, b| a.strike.total_cmp(&b.strike));
        check_static_arbitrage(t, &qs)?;
    }
    Ok(())
}

/// Calls non-increasing and puts non-decreasing in strike; both convex.
fn check_static_arbitrage(t: f64, qs: &[&Quote]) -> Result<()> {
    let scale = qs.iter().fold(0.0f64, |m, q| m.max(q.mid));
    let slack = ARBITRAGE_SLACK * scale.max(1.0);
    for w in qs.windows(2) {
        let d = w[1].mid - w[0].mid;
        let bad = if w[0].kind.is_call() { d > slack } else { d < -slack };
        if bad {
            return Err(Error::Arbitrage(format!(
                "{} prices not monotone between K = {} and K = {} at T = {t}",
                w[0].kind.label(),
                w[0].strike,
                w[1].strike
            )));
        }
    }
    for w in qs.windows(3) {
        let s1 = (w[1].mid - w[0].mid) / (w[1].strike - w[0].strike);
        let s2 = (w[2].mid - w[1].mid) / (w[2].strike - w[1].strike);
        if s2 < s1 - slack / (w[2].strike - w[0].strike) {
            return Err(Error::Arbitrage(format!(
                "{} prices not convex around K = {} at T = {t}",
                w[1].kind.label(),
                w[1].strike
            )));
        }
    }
    Ok(())
}

/// State-price deflator used to discount payoffs.
#[derive(Debug, Clone, PartialEq)]
pub enum Deflator {
    /// No discounting; payoffs are in deflated units already.
    Unit,
    Lgp(LgpParams),
}

impl Deflator {
    pub fn value(&self, t: f64, z: &[f64]) -> Result<f64> {
        match self {
            Self::Unit => Ok(1.0),
            Self::Lgp(p) => p.deflator(t, z),
        }
    }
}

/// State space of the local-volatility chain.
#[derive(Debug, Clone, PartialEq)]
pub enum LvSpace {
    One(Grid1D),
    Two(Grid2D),
}

impl LvSpace {
    pub fn len(&self) -> usize {
        match self {
            Self::One(g) => g.len(),
            Self::Two(g) => g.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Driver coordinates of state `k`.
    pub fn state(&self, k: usize) -> Vec<f64> {
        match self {
            Self::One(g) => vec![g.nodes()[k]],
            Self::Two(g) => {
                let (a, b) = g.coords(k);
                vec![a, b]
            }
        }
    }

    /// Index of the state with every driver at 1.
    pub fn origin(&self) -> Result<usize> {
        match self {
            Self::One(g) => g.index_of(1.0),
            Self::Two(g) => g.index_of(1.0, 1.0),
        }
        .ok_or_else(|| invalid("grid has no node at z = 1"))
    }

    /// Value of the strike observable at each state: `z` or `alpha . z`.
    pub fn observable(&self, weights: Option<[f64; 2]>) -> Result<Vec<f64>> {
        match self {
            Self::One(g) => Ok(g.nodes().to_vec()),
            Self::Two(g) => {
                let w = weights.ok_or_else(|| invalid("two-factor space needs composition weights"))?;
                Ok((0..g.len())
                    .map(|k| {
                        let (a, b) = g.coords(k);
                        w[0] * a + w[1] * b
                    })
                    .collect())
            }
        }
    }

    /// Generator for one speed-factor slice. One factor uses `s_i = sf(z_i) z_i^2`;
    /// two factors use `s = sf(alpha . z)`.
    pub fn generator(&self, slice: &SfSlice, weights: Option<[f64; 2]>) -> Result<SparseGenerator> {
        match self {
            Self::One(g) => {
                let s: Vec<f64> = g.nodes().iter().map(|&z| slice.eval(z) * z * z).collect();
                generator_1d(g, &s)
            }
            Self::Two(g) => {
                let u = self.observable(weights)?;
                let s: Vec<f64> = u.iter().map(|&x| slice.eval(x)).collect();
                if g.is_uniform() {
                    generator_2d_uniform(g, &s)
                } else {
                    generator_2d_nonuniform(g, &s, CrossStencil::Averaged)
                }
            }
        }
    }
}

/// Local-volatility chain: state space, deflator and speed factors.
#[derive(Debug, Clone, PartialEq)]
pub struct LvModel {
    pub space: LvSpace,
    pub deflator: Deflator,
    pub sf: SpeedFactorTermStructure,
}

impl LvModel {
    pub fn initial_distribution(&self) -> Result<Vec<f64>> {
        let mut p = vec![0.0; self.space.len()];
        p[self.space.origin()?] = 1.0;
        Ok(p)
    }

    pub fn interval_generator(&self, k: usize) -> Result<SparseGenerator> {
        let slice = self.sf.slices.get(k).ok_or_else(|| invalid(format!("no speed-factor interval {k}")))?;
        self.space.generator(slice, self.sf.weights)
    }

    /// Distributions at every maturity, chained interval by interval.
    pub fn distributions(&self, eps: f64) -> Result<Vec<Vec<f64>>> {
        let mut p = self.initial_distribution()?;
        let mut prev = 0.0;
        let mut out = Vec::with_capacity(self.sf.maturities.len());
        for (k, &t) in self.sf.maturities.iter().enumerate() {
            p = transient_distribution(&p, &self.interval_generator(k)?, t - prev, eps)?.probabilities;
            out.push(p.clone());
            prev = t;
        }
        Ok(out)
    }

    /// Distribution at an arbitrary time within the horizon.
    pub fn distribution_at(&self, t: f64, eps: f64) -> Result<Vec<f64>> {
        let last = self.sf.interval(t)?;
        let mut p = self.initial_distribution()?;
        let mut prev = 0.0;
        for k in 0..=last {
            let end = self.sf.maturities[k].min(t);
            p = transient_distribution(&p, &self.interval_generator(k)?, end - prev, eps)?.probabilities;
            prev = end;
        }
        Ok(p)
    }

    /// Deflated payoff `M_T(z) Pi(z) / M_0(1)` at every state.
    pub fn payoff_vector(&self, maturity: f64, quote: &Quote) -> Result<Vec<f64>> {
        payoff_vector(&self.space, &self.deflator, self.sf.weights, maturity, quote)
    }

    pub fn price(&self, dist: &[f64], maturity: f64, quote: &Quote) -> Result<f64> {
        let v = self.payoff_vector(maturity, quote)?;
        Ok(dist.iter().zip(&v).map(|(p, x)| p * x).sum())
    }
}

fn payoff_vector(
    space: &LvSpace,
    deflator: &Deflator,
    weights: Option<[f64; 2]>,
    maturity: f64,
    quote: &Quote,
) -> Result<Vec<f64>> {
    let m0 = deflator.value(0.0, &vec![1.0; space.state(0).len()])?;
    let obs = space.observable(weights)?;
    (0..space.len())
        .map(|k| {
            let z = space.state(k);
            let m = deflator.value(maturity, &z)? / m0;
            let k_ = quote.strike;
            Ok(match quote.kind {
                InstrumentKind::Call => m * (obs[k] - k_).max(0.0),
                InstrumentKind::Put => m * (k_ - obs[k]).max(0.0),
                InstrumentKind::BondCall { tenor } => m * (bond_at(deflator, maturity, tenor, &z)? - k_).max(0.0),
                InstrumentKind::BondPut { tenor } => m * (k_ - bond_at(deflator, maturity, tenor, &z)?).max(0.0),
            })
        })
        .collect()
}

fn bond_at(deflator: &Deflator, t: f64, tenor: f64, z: &[f64]) -> Result<f64> {
    let Deflator::Lgp(p) = deflator else {
        return Err(invalid("bond options need a rate curve"));
    };
    if z.len() != 1 {
        return Err(invalid("bond options are supported on one-factor spaces only"));
    }
    let x = p.x_from_z(t, z[0])?;
    p.bond_price_1f(t, t + tenor, x)
}

/// Observable location of a quote's payoff kink: the strike, or the driver
/// value where the bond price crosses the strike.
fn kink_location(space: &LvSpace, deflator: &Deflator, maturity: f64, quote: &Quote) -> Result<f64> {
    let tenor = match quote.kind {
        InstrumentKind::Call | InstrumentKind::Put => return Ok(quote.strike),
        InstrumentKind::BondCall { tenor } | InstrumentKind::BondPut { tenor } => tenor,
    };
    let LvSpace::One(g) = space else {
        return Err(invalid("bond options are supported on one-factor spaces only"));
    };
    let f = |z: f64| bond_at(deflator, maturity, tenor, &[z]).map(|p| p - quote.strike);
    let (mut lo, mut hi) = (g.nodes()[0], g.nodes()[g.len() - 1]);
    let (mut flo, fhi) = (f(lo)?, f(hi)?);
    if flo * fhi > 0.0 {
        return Err(invalid(format!("bond strike {} not crossed on the grid at T = {maturity}", quote.strike)));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid)?;
        if (fm < 0.0) == (flo < 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Model prices for every quote, in quote-set order.
pub fn price_vanillas(model: &LvModel, quotes: &QuoteSet, eps: f64) -> Result<Vec<Vec<f64>>> {
    quotes
        .maturities()
        .iter()
        .map(|m| {
            let dist = model.distribution_at(m.maturity, eps)?;
            m.quotes.iter().map(|q| model.price(&dist, m.maturity, q)).collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct CalibrationOptions {
    /// Largest accepted `|model - mid|` per quote.
    pub tol: f64,
    /// Truncation tolerance of the transient solver inside the fit.
    pub eps: f64,
    pub max_iter: usize,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self { tol: 1e-8, eps: 1e-12, max_iter: 100 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaturityFit {
    pub maturity: f64,
    pub anchors: Vec<f64>,
    pub values: Vec<f64>,
    pub strikes: Vec<f64>,
    pub kinds: Vec<InstrumentKind>,
    pub market: Vec<f64>,
    pub model: Vec<f64>,
    pub iterations: usize,
}

impl MaturityFit {
    pub fn residuals(&self) -> Vec<f64> {
        self.model.iter().zip(&self.market).map(|(m, q)| m - q).collect()
    }

    pub fn max_residual(&self) -> f64 {
        self.residuals().iter().fold(0.0, |m, r| m.max(r.abs()))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitReport {
    pub fits: Vec<MaturityFit>,
}

impl FitReport {
    pub fn max_residual(&self) -> f64 {
        self.fits.iter().fold(0.0, |m, f| m.max(f.max_residual()))
    }

    /// Key/value header, residual table and anchor table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let iterations: usize = self.fits.iter().map(|f| f.iterations).sum();
        writeln!(s, "max_residual = {:.14e}", self.max_residual()).ok();
        writeln!(s, "iterations = {iterations}").ok();
        writeln!(s, "\n[residuals]\nmaturity,strike,kind,market,model,residual").ok();
        for f in &self.fits {
            for (((k, kind), q), m) in f.strikes.iter().zip(&f.kinds).zip(&f.market).zip(&f.model) {
                writeln!(s, "{:.14e},{:.14e},{},{:.14e},{:.14e},{:.14e}", f.maturity, k, kind.label(), q, m, m - q)
                    .ok();
            }
        }
        writeln!(s, "\n[anchors]\nmaturity,anchor,value").ok();
        for f in &self.fits {
            for (a, v) in f.anchors.iter().zip(&f.values) {
                writeln!(s, "{:.14e},{:.14e},{:.14e}", f.maturity, a, v).ok();
            }
        }
        s
    }
}

/// Fits every maturity in turn, starting each slice from `prior` evaluated at
/// the new anchors. Anchor count equals active quote count per maturity.
pub fn calibrate_sf(
    space: &LvSpace,
    deflator: &Deflator,
    quotes: &QuoteSet,
    prior: &SpeedFactorTermStructure,
    opts: &CalibrationOptions,
) -> Result<(SpeedFactorTermStructure, FitReport)> {
    let maturities = quotes.maturity_times();
    let weights = prior.weights;
    let mut slices: Vec<SfSlice> = Vec::with_capacity(maturities.len());
    let mut report = FitReport::default();
    let mut dist: Option<Vec<f64>> = None;
    for (k, m) in quotes.maturities().iter().enumerate() {
        let t_prev = if k == 0 { 0.0 } else { maturities[k - 1] };
        let p_prev = match dist.take() {
            Some(p) => p,
            None => {
                let mut p = vec![0.0; space.len()];
                p[space.origin()?] = 1.0;
                p
            }
        };
        let guess_t = prior.maturities.iter().copied().find(|&x| x >= m.maturity).unwrap_or(prior.horizon());
        let guess = |u: f64| prior.eval(u, guess_t).map(|v| v.max(1e-8));
        let (slice, fit, p) = fit_slice(space, deflator, weights, m, t_prev, &p_prev, guess, opts)?;
        slices.push(slice);
        report.fits.push(fit);
        dist = Some(p);
    }
    Ok((SpeedFactorTermStructure::new(maturities, slices, weights)?, report))
}

/// Refits slice `k` of `model` to `quotes.maturities()[k]`, leaving every other
/// slice untouched.
pub fn recalibrate_maturity(
    model: &LvModel,
    quotes: &QuoteSet,
    k: usize,
    opts: &CalibrationOptions,
) -> Result<(SpeedFactorTermStructure, MaturityFit)> {
    let m = quotes.maturities().get(k).ok_or_else(|| invalid(format!("no quotes for maturity index {k}")))?;
    if model.sf.maturities.get(k) != Some(&m.maturity) {
        return Err(invalid(format!("maturity {k} differs between model and quotes")));
    }
    let t_prev = if k == 0 { 0.0 } else { model.sf.maturities[k - 1] };
    let p_prev = if k == 0 { model.initial_distribution()? } else { model.distributions(opts.eps)?[k - 1].clone() };
    let current = model.sf.slices[k].clone();
    let guess = |u: f64| Ok(current.eval(u).max(1e-8));
    let (slice, fit, _) = fit_slice(&model.space, &model.deflator, model.sf.weights, m, t_prev, &p_prev, guess, opts)?;
    let mut sf = model.sf.clone();
    sf.slices[k] = slice;
    Ok((sf, fit))
}

#[allow(clippy::too_many_arguments)]
fn fit_slice(
    space: &LvSpace,
    deflator: &Deflator,
    weights: Option<[f64; 2]>,
    m: &MaturityQuotes,
    t_prev: f64,
    p_prev: &[f64],
    guess: impl Fn(f64) -> Result<f64>,
    opts: &CalibrationOptions,
) -> Result<(SfSlice, MaturityFit, Vec<f64>)> {
    let active: Vec<&Quote> = m.quotes.iter().filter(|q| q.active).collect();
    if active.is_empty() {
        return Err(invalid(format!("no active quotes at T = {}", m.maturity)));
    }
    let mut located: Vec<(f64, &Quote)> =
        active.iter().map(|q| kink_location(space, deflator, m.maturity, q).map(|a| (a, *q))).collect::<Result<_>>()?;
    located.sort_by(|a, b| a.0.total_cmp(&b.0));
    if located.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(invalid(format!("two quotes share an anchor location at T = {}", m.maturity)));
    }
    let anchors: Vec<f64> = located.iter().map(|(a, _)| *a).collect();
    let payoffs: Vec<Vec<f64>> =
        located.iter().map(|(_, q)| payoff_vector(space, deflator, weights, m.maturity, q)).collect::<Result<_>>()?;
    let dt = m.maturity - t_prev;
    let evolve = |u: &[f64]| -> Result<(SfSlice, Vec<f64>)> {
        let slice = SfSlice::new(anchors.clone(), u.iter().map(|v| v.exp()).collect())?;
        let g = space.generator(&slice, weights)?;
        let p = transient_distribution(p_prev, &g, dt, opts.eps)?.probabilities;
        Ok((slice, p))
    };
    let prices =
        |p: &[f64]| -> Vec<f64> { payoffs.iter().map(|v| v.iter().zip(p).map(|(a, b)| a * b).sum()).collect() };
    let residuals = |u: &[f64]| -> Result<Vec<f64>> {
        let (_, p) = evolve(u)?;
        Ok(prices(&p).iter().zip(&located).map(|(x, (_, q))| x - q.mid).collect())
    };
    let u0: Vec<f64> = anchors.iter().map(|&a| guess(a).map(f64::ln)).collect::<Result<_>>()?;
    let lsq = LsqOptions { max_iter: opts.max_iter, residual_tol: 0.01 * opts.tol, ..Default::default() };
    let res = least_squares(residuals, &u0, &lsq)?;
    if res.max_abs_residual() > opts.tol {
        return Err(Error::FitFailure {
            iterations: res.iterations,
            max_residual: res.max_abs_residual(),
            residuals: res.residuals,
        });
    }
    let (slice, p) = evolve(&res.x)?;
    let fit = MaturityFit {
        maturity: m.maturity,
        anchors: anchors.clone(),
        values: slice.values.clone(),
        strikes: located.iter().map(|(_, q)| q.strike).collect(),
        kinds: located.iter().map(|(_, q)| q.kind).collect(),
        market: located.iter().map(|(_, q)| q.mid).collect(),
        model: prices(&p),
        iterations: res.iterations,
    };
    Ok((slice, fit, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grids::build_z_grid;
    use proptest::prelude::*;

    fn lognormal_grid(strikes: &[f64]) -> Grid1D {
        let mut all = strikes.to_vec();
        if !all.contains(&1.0) {
            all.push(1.0);
        }
        build_z_grid(&all, 0.05, 8.0, 61).unwrap()
    }

    #[test]
    fn slice_interpolation() {
        let s = SfSlice::new(vec![1.0, 2.0], vec![1.0, 3.0]).unwrap();
        assert_eq!(s.eval(1.5), 2.0);
        assert_eq!(s.eval(1.0), 1.0);
        assert_eq!(s.eval(2.0), 3.0);
        assert_eq!(s.eval(0.1), 1.0);
        assert_eq!(s.eval(9.0), 3.0);
        assert!(SfSlice::new(vec![1.0, 2.0], vec![1.0, -1.0]).is_err());
    }

    #[test]
    fn composition_identity() {
        let s = SfSlice::new(vec![0.5, 1.0, 2.0], vec![0.2, 0.5, 0.1]).unwrap();
        let ts = SpeedFactorTermStructure::new(vec![1.0], vec![s], Some([0.5, 0.5])).unwrap();
        for z in [0.3, 0.7, 1.0, 1.4, 3.0] {
            assert_eq!(ts.eval_2d(z, z, 0.5).unwrap(), ts.eval(z, 0.5).unwrap());
        }
    }

    #[test]
    fn term_structure_intervals() {
        let ts = SpeedFactorTermStructure::flat(vec![0.5, 1.0], 0.1, None).unwrap();
        assert_eq!(ts.interval(0.0).unwrap(), 0);
        assert_eq!(ts.interval(0.5).unwrap(), 0);
        assert_eq!(ts.interval(0.5000001).unwrap(), 1);
        assert!(ts.interval(1.5).is_err());
    }

    #[test]
    fn zero_speed_freezes_driver() {
        let g = lognormal_grid(&[0.8, 1.2]);
        let model = LvModel {
            space: LvSpace::One(g),
            deflator: Deflator::Unit,
            sf: SpeedFactorTermStructure::flat(vec![1.0], 0.0, None).unwrap(),
        };
        let dist = model.distribution_at(1.0, 1e-12).unwrap();
        let call = model.price(&dist, 1.0, &Quote::new(0.8, InstrumentKind::Call, 1.0)).unwrap();
        assert!((call - 0.2).abs() < 1e-14);
    }

    #[test]
    fn put_call_parity() {
        let g = lognormal_grid(&[0.9]);
        let model = LvModel {
            space: LvSpace::One(g),
            deflator: Deflator::Unit,
            sf: SpeedFactorTermStructure::flat(vec![1.0], 0.09, None).unwrap(),
        };
        let dist = model.distribution_at(1.0, 1e-12).unwrap();
        let c = model.price(&dist, 1.0, &Quote::new(0.9, InstrumentKind::Call, 1.0)).unwrap();
        let p = model.price(&dist, 1.0, &Quote::new(0.9, InstrumentKind::Put, 1.0)).unwrap();
        assert!((c - p - 0.1).abs() < 1e-9);
    }

    #[test]
    fn arbitrage_rejected_on_ingest() {
        let q = |k: f64, p: f64| Quote::new(k, InstrumentKind::Call, p);
        let increasing = MaturityQuotes { maturity: 1.0, quotes: vec![q(0.9, 0.1), q(1.0, 0.12)] };
        assert!(matches!(QuoteSet::new(vec![increasing]), Err(Error::Arbitrage(_))));
        let concave = MaturityQuotes { maturity: 1.0, quotes: vec![q(0.9, 0.2), q(1.0, 0.16), q(1.1, 0.05)] };
        assert!(matches!(QuoteSet::new(vec![concave]), Err(Error::Arbitrage(_))));
        let dup =
            MaturityQuotes { maturity: 1.0, quotes: vec![q(1.0, 0.1), Quote::new(1.0, InstrumentKind::Put, 0.1)] };
        assert!(QuoteSet::new(vec![dup]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let text = "maturity_years,strike_z,kind,mid,active,tenor\n\
                    1.0,0.9,call,0.15,true,\n\
                    1.0,1.1,put,0.12,,\n\
                    2.0,0.95,bond_call,0.01,false,5\n";
        let qs = QuoteSet::from_csv(text.as_bytes()).unwrap();
        assert_eq!(qs.maturities().len(), 2);
        assert!(!qs.maturities()[1].quotes[0].active);
        assert_eq!(qs.maturities()[1].quotes[0].kind, InstrumentKind::BondCall { tenor: 5.0 });
        let mut buf = Vec::new();
        qs.write_csv(&mut buf).unwrap();
        assert_eq!(QuoteSet::from_csv(buf.as_slice()).unwrap(), qs);
    }

    #[test]
    fn single_quote_matches_bisection() {
        let g = lognormal_grid(&[1.0]);
        let space = LvSpace::One(g);
        let quotes = QuoteSet::new(vec![MaturityQuotes {
            maturity: 1.0,
            quotes: vec![Quote::new(1.0, InstrumentKind::Call, 0.1)],
        }])
        .unwrap();
        let prior = SpeedFactorTermStructure::flat(vec![1.0], 0.04, None).unwrap();
        let (sf, report) =
            calibrate_sf(&space, &Deflator::Unit, &quotes, &prior, &CalibrationOptions::default()).unwrap();
        assert!(report.max_residual() < 1e-10);
        let price = |v: f64| {
            let m = LvModel {
                space: space.clone(),
                deflator: Deflator::Unit,
                sf: SpeedFactorTermStructure::flat(vec![1.0], v, None).unwrap(),
            };
            let d = m.distribution_at(1.0, 1e-12).unwrap();
            m.price(&d, 1.0, &Quote::new(1.0, InstrumentKind::Call, 1.0)).unwrap() - 0.1
        };
        let (mut lo, mut hi) = (1e-4, 1.0);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if price(mid) < 0.0 {
                lo = mid
            } else {
                hi = mid
            }
        }
        assert!((sf.slices[0].values[0] - 0.5 * (lo + hi)).abs() < 1e-7);
    }

    #[test]
    fn bond_option_anchor_crosses_strike() {
        let lgp = LgpParams::one_factor(0.085, 0.1, 0.080, 0.081, 0.909);
        let g = lognormal_grid(&[]);
        let space = LvSpace::One(g);
        let defl = Deflator::Lgp(lgp.clone());
        let q = Quote::new(0.8, InstrumentKind::BondCall { tenor: 5.0 }, 0.01);
        let z = kink_location(&space, &defl, 1.0, &q).unwrap();
        let p = lgp.bond_price_1f(1.0, 6.0, lgp.x_from_z(1.0, z).unwrap()).unwrap();
        assert!((p - 0.8).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn anchor_bump_raises_bracketed_prices(
            values in prop::collection::vec(0.02..0.3f64, 3),
            which in 0usize..3,
            bump in 0.01..0.2f64,
        ) {
            let strikes = [0.8, 1.0, 1.25];
            let g = lognormal_grid(&strikes);
            let base = SfSlice::new(strikes.to_vec(), values.clone()).unwrap();
            let mut up = values.clone();
            up[which] += bump;
            let bumped = SfSlice::new(strikes.to_vec(), up).unwrap();
            let mk = |s: SfSlice| LvModel {
                space: LvSpace::One(g.clone()),
                deflator: Deflator::Unit,
                sf: SpeedFactorTermStructure::new(vec![0.5], vec![s], None).unwrap(),
            };
            let (m0, m1) = (mk(base), mk(bumped));
            let (d0, d1) = (m0.distribution_at(0.5, 1e-12).unwrap(), m1.distribution_at(0.5, 1e-12).unwrap());
            let q = Quote::new(strikes[which], InstrumentKind::Call, 1.0);
            prop_assert!(m1.price(&d1, 0.5, &q).unwrap() >= m0.price(&d0, 0.5, &q).unwrap() - 1e-12);
        }
    }
}
