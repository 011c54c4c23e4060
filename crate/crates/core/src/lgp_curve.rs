//! Linearity-generating term-structure layer: bond prices, short rates, the
//! fractional-linear state map and the affine state-price deflator.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::optim::{least_squares, LsqOptions};

/// Below this `|a - mu|` the bond formula is treated as singular.
const SINGULAR_GAP: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LgpFactor {
    pub mu: f64,
    #[serde(default)]
    pub mu_bar: f64,
    #[serde(default)]
    pub y0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LgpParams {
    pub a: f64,
    pub c: f64,
    pub factors: Vec<LgpFactor>,
    #[serde(default)]
    pub eta0: f64,
    #[serde(default = "one")]
    pub xi0: f64,
}

fn one() -> f64 {
    1.0
}

/// Closed-form zero-volatility state.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroVolState {
    pub x: Vec<f64>,
    /// `e^{-mu_i t} x_i`.
    pub detrended: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveQuote {
    pub maturity: f64,
    pub zero_yield: f64,
}

#[derive(Debug, Clone)]
pub struct CurveFit {
    pub params: LgpParams,
    pub x: Vec<f64>,
    pub residuals: Vec<f64>,
    pub iterations: usize,
}

impl LgpParams {
    pub fn one_factor(a: f64, c: f64, mu: f64, mu_bar: f64, y0: f64) -> Self {
        Self { a, c, factors: vec![LgpFactor { mu, mu_bar, y0 }], eta0: y0, xi0: 1.0 }
    }

    pub fn two_factor(a: f64, c: f64, mu1: f64, mu2: f64, eta0: f64, xi0: f64) -> Self {
        let f = |mu| LgpFactor { mu, mu_bar: mu, y0: 0.0 };
        Self { a, c, factors: vec![f(mu1), f(mu2)], eta0, xi0 }
    }

    pub fn n_factors(&self) -> usize {
        self.factors.len()
    }

    /// Checks the admissible regime: `mu < mu_bar <= a`-type bounds for one
    /// factor and `mu_2 < mu_1` for two.
    pub fn check_regime(&self) -> Result<()> {
        if !(self.a > 0.0 && self.c > 0.0) {
            return Err(invalid("need a > 0 and c > 0"));
        }
        match self.factors.as_slice() {
            [f] => {
                if !(f.mu < self.a && f.mu <= f.mu_bar && f.mu_bar <= self.a) {
                    return Err(invalid("one-factor regime needs mu < a and mu <= mu_bar <= a"));
                }
                if !(0.0 <= self.eta0 && self.eta0 < f.mu_bar / self.a) {
                    return Err(invalid("one-factor regime needs 0 <= eta0 < mu_bar / a"));
                }
                Ok(())
            }
            [f1, f2] if f2.mu < f1.mu => Ok(()),
            [_, _] => Err(invalid("two-factor regime needs mu_2 < mu_1")),
            _ => Err(invalid("only one or two factors are supported")),
        }
    }

    fn single(&self) -> Result<&LgpFactor> {
        match self.factors.as_slice() {
            [f] => Ok(f),
            _ => Err(invalid("operation defined for one factor only")),
        }
    }

    fn growth(&self, mu: f64, tau: f64) -> Result<f64> {
        let gap = self.a - mu;
        if gap.abs() < SINGULAR_GAP {
            return Err(Error::Singular(format!("mu = a = {}", self.a)));
        }
        Ok(((gap * tau).exp() - 1.0) / gap)
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.a * self.factors[k].y0
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.factors[k].mu_bar - self.alpha(k)
    }

    pub fn kappa(&self, k: usize, t: f64) -> f64 {
        let f = &self.factors[k];
        1.0 - f.mu_bar / self.a * (-(self.a - f.mu) * t).exp()
    }

    /// Zero-coupon bond price at `t` for maturity `maturity` given factor values `x`.
    pub fn bond_price(&self, t: f64, maturity: f64, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_factors() {
            return Err(invalid("state length differs from factor count"));
        }
        let tau = maturity - t;
        if tau < 0.0 {
            return Err(invalid(format!("maturity {maturity} before t = {t}")));
        }
        let mut bracket = 1.0;
        for (f, xi) in self.factors.iter().zip(x) {
            bracket += self.c * (-f.mu * t).exp() * self.growth(f.mu, tau)? * xi;
        }
        Ok((-self.a * tau).exp() * bracket)
    }

    pub fn bond_price_1f(&self, t: f64, maturity: f64, x: f64) -> Result<f64> {
        self.single()?;
        self.bond_price(t, maturity, &[x])
    }

    pub fn short_rate(&self, t: f64, x: &[f64]) -> f64 {
        self.a - self.c * self.factors.iter().zip(x).map(|(f, xi)| (-f.mu * t).exp() * xi).sum::<f64>()
    }

    /// Deterministic path without noise. For one factor `eta0` is the path
    /// constant (its reciprocal is `X_0` when `mu = a`).
    pub fn zero_vol_path(&self, t: f64) -> Result<ZeroVolState> {
        let (a, c) = (self.a, self.c);
        let detrended = match self.factors.as_slice() {
            [f] => {
                if (a - f.mu).abs() < SINGULAR_GAP {
                    let den = self.eta0 + c * t;
                    if den <= 0.0 {
                        return Err(invalid(format!("zero-vol denominator {den} <= 0 at t = {t}")));
                    }
                    vec![1.0 / den]
                } else {
                    let den = 1.0 - self.eta0 * (-(a - f.mu) * t).exp();
                    if den <= 0.0 {
                        return Err(invalid(format!("zero-vol denominator {den} <= 0 at t = {t}")));
                    }
                    vec![(a - f.mu) / c / den]
                }
            }
            [f1, f2] => {
                let e1 = (-(f1.mu - a) * t).exp();
                let e2 = (-(f2.mu - a) * t).exp();
                let den = self.xi0 - self.eta0 * e2 + e1;
                if den <= 0.0 {
                    return Err(invalid(format!("zero-vol denominator {den} <= 0 at t = {t}")));
                }
                vec![(a - f1.mu) / c * e1 / den, self.eta0 * (f2.mu - a) / c * e2 / den]
            }
            _ => return Err(invalid("only one or two factors are supported")),
        };
        let x = self.factors.iter().zip(&detrended).map(|(f, d)| d * (f.mu * t).exp()).collect();
        Ok(ZeroVolState { x, detrended })
    }

    /// One-factor state as a fractional-linear function of the driver `z`.
    pub fn x_from_z(&self, t: f64, z: f64) -> Result<f64> {
        let f = self.single()?;
        let (al, be) = (self.alpha(0), self.beta(0));
        if al == 0.0 && be == 0.0 {
            return Err(Error::Singular("alpha = beta = 0".into()));
        }
        let den = al * self.kappa(0, t) + be * z;
        if den == 0.0 {
            return Err(Error::Singular(format!("x_from_z denominator vanishes at z = {z}")));
        }
        Ok((self.a - f.mu) / self.c * (f.mu * t).exp() * (al + be * z) / den)
    }

    /// Deflator normalisation `sum_i (alpha_i kappa_i(0) + beta_i)`, so that the
    /// deflator equals one at `t = 0`, `z = 1`.
    fn deflator_norm(&self) -> Result<f64> {
        let norm: f64 = (0..self.n_factors()).map(|k| self.alpha(k) * self.kappa(k, 0.0) + self.beta(k)).sum();
        let raw: f64 = (0..self.n_factors()).map(|k| self.alpha(k) + self.beta(k)).sum();
        if raw == 0.0 || norm == 0.0 {
            return Err(Error::Singular("deflator normalisation vanishes".into()));
        }
        Ok(norm)
    }

    /// Affine state-price deflator with one driver per factor.
    pub fn deflator(&self, t: f64, z: &[f64]) -> Result<f64> {
        if z.len() != self.n_factors() {
            return Err(invalid("driver length differs from factor count"));
        }
        let norm = self.deflator_norm()?;
        let num: f64 = self
            .factors
            .iter()
            .enumerate()
            .map(|(k, f)| (-f.mu * t).exp() * (self.alpha(k) * self.kappa(k, t) + self.beta(k) * z[k]))
            .sum();
        Ok(num / norm)
    }

    /// Affine coefficients `(m0, m1)` with `deflator(t, z) = m0 + m1 z` (one factor).
    pub fn deflator_affine(&self, t: f64) -> Result<(f64, f64)> {
        let f = self.single()?;
        let norm = self.deflator_norm()?;
        let e = (-f.mu * t).exp();
        Ok((e * self.alpha(0) * self.kappa(0, t) / norm, e * self.beta(0) / norm))
    }

    /// Volatility and market price of risk of the state, as functions of `z`.
    pub fn sigma_lambda_1f(&self, t: f64, z: f64, sigma_hat: f64) -> Result<(f64, f64)> {
        let f = self.single()?;
        let (a, al, be) = (self.a, self.alpha(0), self.beta(0));
        let den = al * self.kappa(0, t) + be * z;
        if be * z == 0.0 || sigma_hat == 0.0 {
            return Ok((0.0, 0.0));
        }
        let sigma =
            al * sigma_hat * f.mu_bar / a * (a - f.mu) / self.c * be * z * (-(a - 2.0 * f.mu) * t).exp() / (den * den);
        let lambda = sigma_hat * be * z / den;
        Ok((sigma, lambda))
    }

    /// Lower and upper bounds of the one-factor short rate at `t`.
    pub fn rate_bounds(&self, t: f64) -> Result<(f64, f64)> {
        let f = self.single()?;
        let k = self.kappa(0, t);
        Ok((self.a - (self.a - f.mu) / k, f.mu))
    }

    /// Zero yields `-ln P(0, T) / T`; `None` where the bond price is not positive.
    pub fn yield_curve(&self, x: &[f64], maturities: &[f64]) -> Result<Vec<Option<f64>>> {
        maturities
            .iter()
            .map(|&m| {
                if m <= 0.0 {
                    return Err(invalid(format!("maturity {m} must be positive")));
                }
                let p = self.bond_price(0.0, m, x)?;
                Ok((p > 0.0).then(|| -p.ln() / m))
            })
            .collect()
    }
}

fn unpack(template: &LgpParams, u: &[f64]) -> (LgpParams, Vec<f64>) {
    let mut p = template.clone();
    p.a = u[0].exp();
    match p.factors.len() {
        1 => {
            p.factors[0].mu = p.a - u[1].exp();
            (p, vec![u[2]])
        }
        _ => {
            p.factors[1].mu = u[1];
            p.factors[0].mu = u[1] + u[2].exp();
            (p, vec![u[3], u[4]])
        }
    }
}

/// Least-squares fit of `a`, the growth rates and the factor values to zero
/// yields, with `c` and the remaining fields taken from `guess`. The one-factor
/// fit keeps `mu < a`; the two-factor fit keeps `mu_2 < mu_1`.
pub fn calibrate_curve(quotes: &[CurveQuote], guess: &LgpParams, x_guess: &[f64]) -> Result<CurveFit> {
    let n = guess.n_factors();
    if !(1..=2).contains(&n) || x_guess.len() != n {
        return Err(invalid("one or two factors with matching initial state"));
    }
    if quotes.len() < n + 2 {
        return Err(invalid(format!("need at least {} curve quotes", n + 2)));
    }
    if quotes.iter().any(|q| q.maturity <= 0.0) {
        return Err(invalid("curve quote maturities must be positive"));
    }
    if guess.a <= 0.0 {
        return Err(invalid("initial a must be positive"));
    }
    let mut u0 = vec![guess.a.ln()];
    if n == 1 {
        let gap = guess.a - guess.factors[0].mu;
        if gap <= 0.0 {
            return Err(invalid("initial guess needs mu < a"));
        }
        u0.extend([gap.ln(), x_guess[0]]);
    } else {
        let gap = guess.factors[0].mu - guess.factors[1].mu;
        if gap <= 0.0 {
            return Err(invalid("initial guess needs mu_2 < mu_1"));
        }
        u0.extend([guess.factors[1].mu, gap.ln(), x_guess[0], x_guess[1]]);
    }
    let residuals = |u: &[f64]| -> Result<Vec<f64>> {
        let (p, x) = unpack(guess, u);
        quotes
            .iter()
            .map(|q| {
                let price = p.bond_price(0.0, q.maturity, &x)?;
                if price <= 0.0 {
                    return Err(invalid("non-positive bond price"));
                }
                Ok(-price.ln() / q.maturity - q.zero_yield)
            })
            .collect()
    };
    let opts = LsqOptions { max_iter: 500, residual_tol: 1e-13, ..Default::default() };
    let res = least_squares(residuals, &u0, &opts)?;
    if !res.converged {
        return Err(Error::FitFailure {
            iterations: res.iterations,
            max_residual: res.max_abs_residual(),
            residuals: res.residuals,
        });
    }
    let (params, x) = unpack(guess, &res.x);
    Ok(CurveFit { params, x, residuals: res.residuals, iterations: res.iterations })
}
