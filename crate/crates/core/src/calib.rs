//! Least-squares calibration of the model to a grid of vanilla quotes,
//! Black-76 implied volatilities and fit-quality reports.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FuturesCurve, ModelParams, NumericsConfig, OptionKind};
use crate::pricers::{black76, VanillaSlice};

/// Strikes of the standard harness, as fractions of the futures price.
pub const STANDARD_MONEYNESS: [f64; 7] = [0.6, 0.8, 0.9, 1.0, 1.1, 1.2, 1.5];

/// Option expiries of the standard harness, from two months to four years.
pub const STANDARD_EXPIRIES: [f64; 5] = [2.0 / 12.0, 0.5, 1.0, 2.0, 4.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrikeKind {
    /// Strike as a fraction of `F(0, T_m)`.
    Moneyness,
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Price,
    /// Black-76 implied volatility.
    Vol,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quote {
    pub expiry: f64,
    pub futures_maturity: f64,
    pub strike_input: f64,
    pub strike_kind: StrikeKind,
    pub value_kind: ValueKind,
    pub value: f64,
    pub kind: OptionKind,
}

impl Quote {
    pub fn strike(&self, curve: &FuturesCurve) -> f64 {
        match self.strike_kind {
            StrikeKind::Moneyness => self.strike_input * curve.price(self.futures_maturity),
            StrikeKind::Absolute => self.strike_input,
        }
    }

    /// At the money: moneyness one, or an absolute strike at the forward.
    pub fn is_atm(&self, curve: &FuturesCurve) -> bool {
        match self.strike_kind {
            StrikeKind::Moneyness => (self.strike_input - 1.0).abs() < 1e-12,
            StrikeKind::Absolute => {
                let f = curve.price(self.futures_maturity);
                (self.strike_input / f - 1.0).abs() < 1e-9
            }
        }
    }
}

/// Observed vanilla quotes with the curve and rate they refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct QuoteSet {
    pub quotes: Vec<Quote>,
    pub rate: f64,
    pub curve: FuturesCurve,
}

#[derive(Debug, Serialize, Deserialize)]
struct QuoteRow {
    #[serde(rename = "T")]
    t: f64,
    #[serde(rename = "Tm")]
    tm: f64,
    moneyness_or_strike: f64,
    strike_kind: String,
    value_kind: String,
    value: f64,
    flag: String,
}

fn parse_flag(s: &str) -> Option<OptionKind> {
    match s.trim().to_ascii_lowercase().as_str() {
        "c" | "call" => Some(OptionKind::Call),
        "p" | "put" => Some(OptionKind::Put),
        _ => None,
    }
}

impl QuoteSet {
    pub fn new(quotes: Vec<Quote>, rate: f64, curve: FuturesCurve) -> Result<Self> {
        let set = Self { quotes, rate, curve };
        set.validate()?;
        Ok(set)
    }

    /// CSV with header `T,Tm,moneyness_or_strike,strike_kind,value_kind,value,flag`.
    pub fn from_csv_reader(r: impl Read, rate: f64, curve: FuturesCurve) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let mut quotes = Vec::new();
        for (i, row) in rdr.deserialize::<QuoteRow>().enumerate() {
            let line = i + 2;
            let row = row?;
            let bad = |msg: String| Error::Parse { line: Some(line), msg };
            let strike_kind = match row.strike_kind.to_ascii_lowercase().as_str() {
                "moneyness" | "m" => StrikeKind::Moneyness,
                "strike" | "absolute" | "k" => StrikeKind::Absolute,
                other => return Err(bad(format!("unknown strike_kind '{other}'"))),
            };
            let value_kind = match row.value_kind.to_ascii_lowercase().as_str() {
                "price" => ValueKind::Price,
                "vol" | "iv" => ValueKind::Vol,
                other => return Err(bad(format!("unknown value_kind '{other}'"))),
            };
            let kind = parse_flag(&row.flag).ok_or_else(|| bad(format!("unknown flag '{}'", row.flag)))?;
            quotes.push(Quote {
                expiry: row.t,
                futures_maturity: row.tm,
                strike_input: row.moneyness_or_strike,
                strike_kind,
                value_kind,
                value: row.value,
                kind,
            });
        }
        if quotes.is_empty() {
            return Err(Error::Parse {
                line: None,
                msg: "no quotes".into(),
            });
        }
        Self::new(quotes, rate, curve)
    }

    pub fn from_csv_file(path: impl AsRef<Path>, rate: f64, curve: FuturesCurve) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?, rate, curve)
    }

    pub fn to_csv_writer(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for q in &self.quotes {
            wr.serialize(QuoteRow {
                t: q.expiry,
                tm: q.futures_maturity,
                moneyness_or_strike: q.strike_input,
                strike_kind: match q.strike_kind {
                    StrikeKind::Moneyness => "moneyness".into(),
                    StrikeKind::Absolute => "strike".into(),
                },
                value_kind: match q.value_kind {
                    ValueKind::Price => "price".into(),
                    ValueKind::Vol => "vol".into(),
                },
                value: q.value,
                flag: match q.kind {
                    OptionKind::Call => "call".into(),
                    OptionKind::Put => "put".into(),
                },
            })?;
        }
        wr.flush()?;
        Ok(())
    }

    fn discount(&self, q: &Quote) -> f64 {
        (-self.rate * q.expiry).exp()
    }

    /// Observed value as a price.
    pub fn observed_price(&self, q: &Quote) -> f64 {
        match q.value_kind {
            ValueKind::Price => q.value,
            ValueKind::Vol => black76(
                self.curve.price(q.futures_maturity),
                q.strike(&self.curve),
                q.expiry,
                q.value,
                self.rate,
                q.kind,
            ),
        }
    }

    /// Observed value as an implied volatility.
    pub fn observed_vol(&self, q: &Quote) -> Result<f64> {
        match q.value_kind {
            ValueKind::Vol => Ok(q.value),
            ValueKind::Price => Ok(implied_vol_black76(
                q.value,
                self.curve.price(q.futures_maturity),
                q.strike(&self.curve),
                q.expiry,
                self.rate,
                q.kind,
            )?
            .vol),
        }
    }

    /// Positive prices inside the no-arbitrage band.
    pub fn validate(&self) -> Result<()> {
        for (i, q) in self.quotes.iter().enumerate() {
            let bad = |msg: String| Error::invalid(format!("quote {}: {msg}", i + 1));
            if !(q.expiry > 0.0 && q.expiry <= q.futures_maturity) {
                return Err(bad(format!("need 0 < T <= Tm, got T = {}, Tm = {}", q.expiry, q.futures_maturity)));
            }
            let k = q.strike(&self.curve);
            if !(k > 0.0 && k.is_finite()) {
                return Err(bad(format!("strike {k} must be positive")));
            }
            match q.value_kind {
                ValueKind::Vol => {
                    if !(q.value > 0.0 && q.value.is_finite()) {
                        return Err(bad(format!("volatility {} must be positive", q.value)));
                    }
                }
                ValueKind::Price => {
                    let f = self.curve.price(q.futures_maturity);
                    let d = self.discount(q);
                    let (lo, hi) = price_band(f, k, d, q.kind);
                    let slack = 1e-12 * d * f.max(k);
                    if !(q.value > 0.0 && q.value >= lo - slack && q.value <= hi + slack) {
                        return Err(bad(format!("price {} outside the band [{lo}, {hi}]", q.value)));
                    }
                }
            }
        }
        Ok(())
    }

    /// Indices grouped by `(T, Tm)` in first-appearance order.
    fn slices(&self) -> Vec<((f64, f64), Vec<usize>)> {
        let mut out: Vec<((f64, f64), Vec<usize>)> = Vec::new();
        for (i, q) in self.quotes.iter().enumerate() {
            let key = (q.expiry, q.futures_maturity);
            match out.iter_mut().find(|(k, _)| *k == key) {
                Some((_, v)) => v.push(i),
                None => out.push((key, vec![i])),
            }
        }
        out
    }

    /// Every slice has the same set of strikes.
    pub fn is_complete_grid(&self) -> bool {
        let slices = self.slices();
        let strikes = |idx: &[usize]| {
            let mut s: Vec<u64> = idx.iter().map(|&i| self.quotes[i].strike_input.to_bits()).collect();
            s.sort_unstable();
            s
        };
        let first = strikes(&slices[0].1);
        slices.iter().all(|(_, idx)| strikes(idx) == first)
    }

    /// Prices generated by `model` on a moneyness grid, puts below the money
    /// and calls at or above it.
    pub fn synthetic(
        model: &ModelParams,
        curve: FuturesCurve,
        rate: f64,
        expiries: &[f64],
        moneyness: &[f64],
        cfg: &NumericsConfig,
    ) -> Result<Self> {
        let mut quotes = Vec::new();
        for &t in expiries {
            let slice = VanillaSlice::new(model, &curve, t, t, rate, cfg)?;
            for &m in moneyness {
                let kind = if m < 1.0 { OptionKind::Put } else { OptionKind::Call };
                quotes.push(Quote {
                    expiry: t,
                    futures_maturity: t,
                    strike_input: m,
                    strike_kind: StrikeKind::Moneyness,
                    value_kind: ValueKind::Price,
                    value: slice.price(m * slice.forward, kind)?,
                    kind,
                });
            }
        }
        Self::new(quotes, rate, curve)
    }

    /// The standard 5 x 7 harness grid.
    pub fn standard(model: &ModelParams, curve: FuturesCurve, rate: f64, cfg: &NumericsConfig) -> Result<Self> {
        Self::synthetic(model, curve, rate, &STANDARD_EXPIRIES, &STANDARD_MONEYNESS, cfg)
    }
}

/// `(lower, upper)` no-arbitrage band for a discounted option price.
fn price_band(f: f64, k: f64, d: f64, kind: OptionKind) -> (f64, f64) {
    match kind {
        OptionKind::Call => (d * (f - k).max(0.0), d * f),
        OptionKind::Put => (d * (k - f).max(0.0), d * k),
    }
}

/// Model prices for every quote, one characteristic-function slice per
/// `(T, Tm)` pair.
pub fn model_prices(model: &ModelParams, quotes: &QuoteSet, cfg: &NumericsConfig) -> Result<Vec<f64>> {
    let slices = quotes.slices();
    let parts: Vec<Vec<(usize, f64)>> = slices
        .par_iter()
        .map(|((t, tm), idx)| {
            let s = VanillaSlice::new(model, &quotes.curve, *t, *tm, quotes.rate, cfg)?;
            idx.iter()
                .map(|&i| {
                    let q = &quotes.quotes[i];
                    Ok((i, s.price(q.strike(&quotes.curve), q.kind)?))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut out = vec![0.0; quotes.quotes.len()];
    for (i, p) in parts.into_iter().flatten() {
        out[i] = p;
    }
    Ok(out)
}

/// Quantity matched by the least-squares objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveSpace {
    #[default]
    Price,
    Vol,
}

/// Targets precomputed once per calibration.
struct Targets {
    prices: Vec<f64>,
    vols: Option<Vec<f64>>,
}

impl Targets {
    fn new(quotes: &QuoteSet, space: ObjectiveSpace) -> Result<Self> {
        let prices = quotes.quotes.iter().map(|q| quotes.observed_price(q)).collect();
        let vols = match space {
            ObjectiveSpace::Price => None,
            ObjectiveSpace::Vol => Some(quotes.quotes.iter().map(|q| quotes.observed_vol(q)).collect::<Result<_>>()?),
        };
        Ok(Self { prices, vols })
    }

    fn sse(&self, model: &ModelParams, quotes: &QuoteSet, cfg: &NumericsConfig) -> Result<f64> {
        let prices = model_prices(model, quotes, cfg)?;
        match &self.vols {
            None => Ok(prices.iter().zip(&self.prices).map(|(m, o)| (m - o).powi(2)).sum()),
            Some(vols) => {
                let mut s = 0.0;
                for ((q, p), v) in quotes.quotes.iter().zip(&prices).zip(vols) {
                    let iv = implied_vol_black76(
                        *p,
                        quotes.curve.price(q.futures_maturity),
                        q.strike(&quotes.curve),
                        q.expiry,
                        quotes.rate,
                        q.kind,
                    )?;
                    s += (iv.vol - v).powi(2);
                }
                Ok(s)
            }
        }
    }
}

/// Sum of squared price errors over the quote set. A pricing failure yields
/// `f64::INFINITY`; use [`objective_checked`] to see the cause.
pub fn objective(model: &ModelParams, quotes: &QuoteSet, cfg: &NumericsConfig) -> f64 {
    objective_checked(model, quotes, cfg).unwrap_or(f64::INFINITY)
}

pub fn objective_checked(model: &ModelParams, quotes: &QuoteSet, cfg: &NumericsConfig) -> Result<f64> {
    model.ensure_valid()?;
    Targets::new(quotes, ObjectiveSpace::Price)?.sse(model, quotes, cfg)
}

// ---------------------------------------------------------------------------
// Implied volatility

/// Result of a Black-76 inversion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ImpliedVol {
    pub vol: f64,
    /// The price sits within the tolerance of an edge of the no-arbitrage
    /// band, so the volatility is poorly determined.
    pub near_boundary: bool,
    pub iterations: usize,
}

const IV_PRICE_TOL: f64 = 1e-10;
const IV_MAX_VOL: f64 = 100.0;

/// Black-76 implied volatility by a bracketed Illinois search on the
/// out-of-the-money side, to `1e-10` in price.
pub fn implied_vol_black76(price: f64, f: f64, k: f64, t: f64, r: f64, kind: OptionKind) -> Result<ImpliedVol> {
    if !(f > 0.0 && k > 0.0 && t > 0.0 && price.is_finite()) {
        return Err(Error::invalid(format!("bad implied-vol inputs: price {price}, F {f}, K {k}, T {t}")));
    }
    let d = (-r * t).exp();
    let (lo, hi) = price_band(f, k, d, kind);
    let tol = IV_PRICE_TOL;
    if price < lo - tol || price > hi + tol {
        return Err(Error::NoSolution(format!(
            "price {price} outside the no-arbitrage band [{lo}, {hi}] (F {f}, K {k}, T {t})"
        )));
    }
    // The out-of-the-money option carries the time value without the intrinsic part.
    let otm = if k >= f { OptionKind::Call } else { OptionKind::Put };
    let target = match (kind, otm) {
        (OptionKind::Call, OptionKind::Put) => price - d * (f - k),
        (OptionKind::Put, OptionKind::Call) => price + d * (f - k),
        _ => price,
    };
    let upper = price_band(f, k, d, otm).1;
    if target <= tol {
        return Ok(ImpliedVol {
            vol: 0.0,
            near_boundary: true,
            iterations: 0,
        });
    }
    if target >= upper - tol {
        return Ok(ImpliedVol {
            vol: f64::INFINITY,
            near_boundary: true,
            iterations: 0,
        });
    }
    let g = |s: f64| black76(f, k, t, s, r, otm) - target;
    // Expand the bracket outwards from a unit-order guess.
    let (mut a, mut b) = (0.05, 1.0);
    let mut iterations = 0;
    while g(a) > 0.0 && a > 1e-8 {
        a *= 0.25;
        iterations += 1;
    }
    while g(b) < 0.0 && b < IV_MAX_VOL {
        b *= 2.0;
        iterations += 1;
    }
    let (mut ga, mut gb) = (g(a), g(b));
    if ga > 0.0 || gb < 0.0 {
        return Ok(ImpliedVol {
            vol: if ga > 0.0 { a } else { b },
            near_boundary: true,
            iterations,
        });
    }
    let scale_tol = tol.min(1e-6 * target);
    let mut side = 0;
    let mut x = a;
    for _ in 0..200 {
        iterations += 1;
        x = (a * gb - b * ga) / (gb - ga);
        let gx = g(x);
        if gx.abs() <= scale_tol || (b - a) < 1e-15 * b {
            break;
        }
        if gx < 0.0 {
            a = x;
            ga = gx;
            if side == -1 {
                gb *= 0.5;
            }
            side = -1;
        } else {
            b = x;
            gb = gx;
            if side == 1 {
                ga *= 0.5;
            }
            side = 1;
        }
    }
    Ok(ImpliedVol {
        vol: x,
        near_boundary: false,
        iterations,
    })
}

// ---------------------------------------------------------------------------
// Fit report

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceVol {
    pub price: f64,
    pub vol: f64,
}

/// Mean absolute and root mean squared errors, laid out as price and
/// volatility columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    #[serde(rename = "MAE")]
    pub mae: PriceVol,
    #[serde(rename = "MAE_ATM")]
    pub mae_atm: PriceVol,
    #[serde(rename = "RMSE")]
    pub rmse: PriceVol,
    pub quotes: usize,
    pub atm_quotes: usize,
    /// Quotes whose model or observed implied volatility could not be found;
    /// they are left out of the volatility columns.
    pub vol_failures: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub expiry: f64,
    pub futures_maturity: f64,
    pub strike: f64,
    pub kind: OptionKind,
    pub observed_price: f64,
    pub model_price: f64,
    pub observed_vol: Option<f64>,
    pub model_vol: Option<f64>,
}

impl Residual {
    pub fn price_error(&self) -> f64 {
        self.model_price - self.observed_price
    }

    pub fn vol_error(&self) -> Option<f64> {
        Some(self.model_vol? - self.observed_vol?)
    }
}

pub fn residuals(model: &ModelParams, quotes: &QuoteSet, cfg: &NumericsConfig) -> Result<Vec<Residual>> {
    let prices = model_prices(model, quotes, cfg)?;
    Ok(quotes
        .quotes
        .iter()
        .zip(prices)
        .map(|(q, p)| {
            let f = quotes.curve.price(q.futures_maturity);
            let k = q.strike(&quotes.curve);
            let iv = |x: f64| {
                implied_vol_black76(x, f, k, q.expiry, quotes.rate, q.kind)
                    .ok()
                    .filter(|v| v.vol.is_finite())
                    .map(|v| v.vol)
            };
            Residual {
                expiry: q.expiry,
                futures_maturity: q.futures_maturity,
                strike: k,
                kind: q.kind,
                observed_price: quotes.observed_price(q),
                model_price: p,
                observed_vol: match q.value_kind {
                    ValueKind::Vol => Some(q.value),
                    ValueKind::Price => iv(q.value),
                },
                model_vol: iv(p),
            }
        })
        .collect())
}

/// Fit statistics from precomputed residuals; `atm` flags the at-the-money subset.
pub fn error_report_from(residuals: &[Residual], atm: &[bool]) -> ErrorReport {
    fn stats<'a>(it: impl Iterator<Item = &'a Residual> + Clone) -> (PriceVol, PriceVol, usize, usize) {
        let n = it.clone().count();
        let (mut ap, mut sp) = (0.0, 0.0);
        let (mut av, mut sv, mut nv) = (0.0, 0.0, 0usize);
        for r in it {
            let e = r.price_error();
            ap += e.abs();
            sp += e * e;
            if let Some(v) = r.vol_error() {
                av += v.abs();
                sv += v * v;
                nv += 1;
            }
        }
        let div = |x: f64, n: usize| if n > 0 { x / n as f64 } else { f64::NAN };
        (
            PriceVol {
                price: div(ap, n),
                vol: div(av, nv),
            },
            PriceVol {
                price: div(sp, n).sqrt(),
                vol: div(sv, nv).sqrt(),
            },
            n,
            n - nv,
        )
    }
    let (mae, rmse, n, failures) = stats(residuals.iter());
    let (mae_atm, _, n_atm, _) = stats(residuals.iter().zip(atm).filter(|(_, &a)| a).map(|(r, _)| r));
    ErrorReport {
        mae,
        mae_atm,
        rmse,
        quotes: n,
        atm_quotes: n_atm,
        vol_failures: failures,
    }
}

pub fn error_report(model: &ModelParams, quotes: &QuoteSet, cfg: &NumericsConfig) -> Result<ErrorReport> {
    let res = residuals(model, quotes, cfg)?;
    let atm: Vec<bool> = quotes.quotes.iter().map(|q| q.is_atm(&quotes.curve)).collect();
    Ok(error_report_from(&res, &atm))
}

// ---------------------------------------------------------------------------
// Parameter space

/// Box constraints on the flattened parameter vector. A parameter with equal
/// bounds is held fixed at that value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBounds {
    pub names: Vec<String>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Flattened parameters: per stochastic factor `kappa, theta, sigma, rho, v0,
/// lambda`, then per deterministic factor `sigma_hat, lambda`.
pub fn flatten(model: &ModelParams) -> Vec<f64> {
    let mut x = Vec::new();
    for f in &model.factors {
        x.extend([f.kappa, f.theta, f.sigma, f.rho, f.v0, f.lambda]);
    }
    for d in &model.deterministic_factors {
        x.extend([d.sigma_hat, d.lambda]);
    }
    x
}

/// Inverse of [`flatten`] using `template` for the model layout.
pub fn unflatten(template: &ModelParams, x: &[f64]) -> ModelParams {
    let mut m = template.clone();
    let mut it = x.iter().copied();
    let mut next = || it.next().unwrap_or(f64::NAN);
    for f in &mut m.factors {
        f.kappa = next();
        f.theta = next();
        f.sigma = next();
        f.rho = next();
        f.v0 = next();
        f.lambda = next();
    }
    for d in &mut m.deterministic_factors {
        d.sigma_hat = next();
        d.lambda = next();
    }
    m
}

pub fn param_names(model: &ModelParams) -> Vec<String> {
    let mut names = Vec::new();
    for j in 0..model.factors.len() {
        for p in ["kappa", "theta", "sigma", "rho", "v0", "lambda"] {
            names.push(format!("f{j}.{p}"));
        }
    }
    for j in 0..model.deterministic_factors.len() {
        for p in ["sigma_hat", "lambda"] {
            names.push(format!("d{j}.{p}"));
        }
    }
    names
}

impl ParamBounds {
    /// Wide default box for every parameter of `model`.
    pub fn default_for(model: &ModelParams) -> Self {
        let mut lower = Vec::new();
        let mut upper = Vec::new();
        for _ in &model.factors {
            lower.extend([0.05, 1e-4, 0.01, -0.95, 1e-4, 0.0]);
            upper.extend([10.0, 1.0, 2.0, 0.95, 1.0, 5.0]);
        }
        for _ in &model.deterministic_factors {
            lower.extend([0.01, 0.0]);
            upper.extend([2.0, 5.0]);
        }
        Self {
            names: param_names(model),
            lower,
            upper,
        }
    }

    /// Every parameter fixed at its value in `model`.
    pub fn frozen(model: &ModelParams) -> Self {
        let x = flatten(model);
        Self {
            names: param_names(model),
            lower: x.clone(),
            upper: x,
        }
    }

    pub fn set(mut self, name: &str, lower: f64, upper: f64) -> Result<Self> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter '{name}'")))?;
        self.lower[i] = lower;
        self.upper[i] = upper;
        Ok(self)
    }

    /// Indices of parameters with a non-degenerate range.
    pub fn free(&self) -> Vec<usize> {
        (0..self.lower.len()).filter(|&i| self.upper[i] > self.lower[i]).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().enumerate().all(|(i, v)| *v >= self.lower[i] && *v <= self.upper[i])
    }

    /// Checks the box against the layout and the parameter invariants.
    pub fn validate(&self, model: &ModelParams) -> Result<()> {
        let n = flatten(model).len();
        if self.lower.len() != n || self.upper.len() != n {
            return Err(Error::invalid(format!("bounds have {} entries, model has {n}", self.lower.len())));
        }
        for i in 0..n {
            if !(self.lower[i] <= self.upper[i]) {
                return Err(Error::invalid(format!("empty range for {}", self.names[i])));
            }
        }
        let lo = unflatten(model, &self.lower);
        let hi = unflatten(model, &self.upper);
        for m in [&lo, &hi] {
            if !m.violations().is_empty() {
                return Err(Error::invalid(format!(
                    "bounds leave the admissible parameter set: {}",
                    m.violations().join("; ")
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Starting points: the initial guess plus `starts - 1` low-discrepancy points.
    pub starts: usize,
    /// Evaluation budget of the screening run from each start.
    pub screen_evals: usize,
    /// Total evaluation budget of the final run from the best screened point.
    pub max_evals: usize,
    /// Stop when the simplex values spread less than this (absolute).
    pub f_tol: f64,
    /// Stop when the simplex is this small in unit-box coordinates.
    pub x_tol: f64,
    /// Initial simplex edge in unit-box coordinates.
    pub initial_step: f64,
    pub seed: u64,
    pub space: ObjectiveSpace,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            starts: 8,
            screen_evals: 300,
            max_evals: 6000,
            f_tol: 1e-16,
            x_tol: 1e-10,
            initial_step: 0.05,
            seed: 20_150_701,
            space: ObjectiveSpace::Price,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub start: usize,
    pub phase: String,
    pub evaluations: usize,
    pub objective: f64,
    /// Objective evaluations that failed to price.
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibResult {
    pub theta_star: ModelParams,
    pub objective: f64,
    pub initial_objective: f64,
    pub space: ObjectiveSpace,
    pub errors: ErrorReport,
    pub residuals: Vec<Residual>,
    pub log: Vec<LogEntry>,
    pub evaluations: usize,
}

impl CalibResult {
    pub fn to_json_writer(&self, w: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }
}

/// Scrambled Halton points in the unit cube.
fn scrambled_halton(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    const PRIMES: [u64; 24] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perms: Vec<Vec<u64>> = (0..dim)
        .map(|d| {
            let b = PRIMES[d % PRIMES.len()];
            let mut p: Vec<u64> = (0..b).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();
    (1..=count as u64)
        .map(|i| {
            (0..dim)
                .map(|d| {
                    let b = PRIMES[d % PRIMES.len()];
                    let (mut n, mut f, mut x) = (i, 1.0 / b as f64, 0.0);
                    while n > 0 {
                        x += perms[d][(n % b) as usize] as f64 * f;
                        n /= b;
                        f /= b as f64;
                    }
                    x
                })
                .collect()
        })
        .collect()
}

struct NelderMead {
    simplex: Vec<Vec<f64>>,
    values: Vec<f64>,
    evaluations: usize,
}

impl NelderMead {
    fn project(y: &mut [f64]) {
        for v in y {
            *v = v.clamp(0.0, 1.0);
        }
    }

    fn new(start: &[f64], step: f64, f: &mut impl FnMut(&[f64]) -> f64) -> Self {
        let n = start.len();
        let mut simplex = vec![start.to_vec()];
        for i in 0..n {
            let mut y = start.to_vec();
            // step inwards when the start sits on the upper face
            y[i] += if y[i] + step <= 1.0 { step } else { -step };
            Self::project(&mut y);
            simplex.push(y);
        }
        let values: Vec<f64> = simplex.iter().map(|y| f(y)).collect();
        Self {
            simplex,
            values,
            evaluations: n + 1,
        }
    }

    fn best(&self) -> (Vec<f64>, f64) {
        let i = (0..self.values.len())
            .min_by(|&a, &b| self.values[a].total_cmp(&self.values[b]))
            .unwrap();
        (self.simplex[i].clone(), self.values[i])
    }

    fn converged(&self, f_tol: f64, x_tol: f64) -> bool {
        let (best, fb) = self.best();
        let f_spread = self.values.iter().map(|v| (v - fb).abs()).fold(0.0, f64::max);
        let x_spread = self
            .simplex
            .iter()
            .flat_map(|y| y.iter().zip(&best).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        f_spread <= f_tol || x_spread <= x_tol
    }

    /// Adaptive coefficients for higher dimensions.
    fn run(&mut self, budget: usize, f_tol: f64, x_tol: f64, f: &mut impl FnMut(&[f64]) -> f64) {
        let n = self.simplex.len() - 1;
        let nf = n as f64;
        let (alpha, gamma, rho, shrink) = (1.0, 1.0 + 2.0 / nf, 0.75 - 0.5 / nf, 1.0 - 1.0 / nf.max(2.0));
        while self.evaluations < budget && !self.converged(f_tol, x_tol) {
            let mut order: Vec<usize> = (0..=n).collect();
            order.sort_by(|&a, &b| self.values[a].total_cmp(&self.values[b]));
            self.simplex = order.iter().map(|&i| self.simplex[i].clone()).collect();
            self.values = order.iter().map(|&i| self.values[i]).collect();
            let centroid: Vec<f64> = (0..n).map(|k| self.simplex[..n].iter().map(|y| y[k]).sum::<f64>() / nf).collect();
            let worst = self.simplex[n].clone();
            let along = |t: f64| {
                let mut y: Vec<f64> = centroid.iter().zip(&worst).map(|(c, w)| c + t * (c - w)).collect();
                Self::project(&mut y);
                y
            };
            let yr = along(alpha);
            let fr = f(&yr);
            self.evaluations += 1;
            if fr < self.values[0] {
                let ye = along(alpha * gamma);
                let fe = f(&ye);
                self.evaluations += 1;
                if fe < fr {
                    self.simplex[n] = ye;
                    self.values[n] = fe;
                } else {
                    self.simplex[n] = yr;
                    self.values[n] = fr;
                }
                continue;
            }
            if fr < self.values[n - 1] {
                self.simplex[n] = yr;
                self.values[n] = fr;
                continue;
            }
            let (yc, fc) = if fr < self.values[n] {
                let y = along(alpha * rho);
                let v = f(&y);
                (y, v)
            } else {
                let y = along(-rho);
                let v = f(&y);
                (y, v)
            };
            self.evaluations += 1;
            if fc < self.values[n].min(fr) {
                self.simplex[n] = yc;
                self.values[n] = fc;
                continue;
            }
            let best = self.simplex[0].clone();
            for i in 1..=n {
                let y: Vec<f64> = best.iter().zip(&self.simplex[i]).map(|(b, v)| b + shrink * (v - b)).collect();
                self.values[i] = f(&y);
                self.simplex[i] = y;
                self.evaluations += 1;
            }
        }
    }
}

/// Nelder-Mead from `start` with restarts around the incumbent until a
/// restart stops improving or the budget runs out.
fn minimize(
    start: &[f64],
    budget: usize,
    opt: &OptimizerConfig,
    f: &mut impl FnMut(&[f64]) -> f64,
) -> (Vec<f64>, f64, usize) {
    let mut used = 0;
    let mut x = start.to_vec();
    let mut fx = f64::INFINITY;
    let mut step = opt.initial_step;
    while used < budget {
        let mut nm = NelderMead::new(&x, step, f);
        nm.run(budget - used, opt.f_tol, opt.x_tol, f);
        used += nm.evaluations;
        let (y, fy) = nm.best();
        let gained = fx - fy;
        if fy < fx {
            x = y;
            fx = fy;
        }
        if !(gained > opt.f_tol.max(1e-12 * fx.abs())) {
            break;
        }
        // later restarts use a smaller simplex around the incumbent
        step = (step * 0.5).max(1e-4);
    }
    (x, fx, used)
}

/// Multi-start Nelder-Mead in the unit box spanned by `bounds`, projected
/// back onto the box after every move. Each start gets a short screening
/// run; the best screened point then gets the remaining budget.
pub fn calibrate(
    initial: &ModelParams,
    quotes: &QuoteSet,
    bounds: &ParamBounds,
    opt: &OptimizerConfig,
    cfg: &NumericsConfig,
) -> Result<CalibResult> {
    bounds.validate(initial)?;
    let free = bounds.free();
    let x_init = flatten(initial);
    let targets = Targets::new(quotes, opt.space)?;

    let to_params = |y: &[f64]| {
        let mut x = bounds.lower.clone();
        for (k, &i) in free.iter().enumerate() {
            x[i] = bounds.lower[i] + y[k] * (bounds.upper[i] - bounds.lower[i]);
        }
        unflatten(initial, &x)
    };
    let eval = |y: &[f64]| -> Option<f64> {
        let m = to_params(y);
        if !m.violations().is_empty() {
            return None;
        }
        targets.sse(&m, quotes, cfg).ok().filter(|v| v.is_finite())
    };

    let initial_objective = if initial.violations().is_empty() {
        targets.sse(initial, quotes, cfg).unwrap_or(f64::INFINITY)
    } else {
        f64::INFINITY
    };
    let y0: Vec<f64> = free
        .iter()
        .map(|&i| ((x_init[i] - bounds.lower[i]) / (bounds.upper[i] - bounds.lower[i])).clamp(0.0, 1.0))
        .collect();
    let mut starts = vec![y0];
    starts.extend(scrambled_halton(free.len(), opt.starts.saturating_sub(1), opt.seed));

    if free.is_empty() {
        let residuals = residuals(initial, quotes, cfg)?;
        let atm: Vec<bool> = quotes.quotes.iter().map(|q| q.is_atm(&quotes.curve)).collect();
        return Ok(CalibResult {
            theta_star: initial.clone(),
            objective: initial_objective,
            initial_objective,
            space: opt.space,
            errors: error_report_from(&residuals, &atm),
            residuals,
            log: Vec::new(),
            evaluations: 1,
        });
    }

    let run = |start: usize, y: &[f64], budget: usize, phase: &str| {
        let mut failures = 0;
        let mut f = |y: &[f64]| {
            eval(y).unwrap_or_else(|| {
                failures += 1;
                f64::INFINITY
            })
        };
        let (y, fy, used) = minimize(y, budget, opt, &mut f);
        (
            y,
            fy,
            LogEntry {
                start,
                phase: phase.to_string(),
                evaluations: used,
                objective: fy,
                failures,
            },
        )
    };

    let screened: Vec<(Vec<f64>, f64, LogEntry)> = starts
        .par_iter()
        .enumerate()
        .map(|(i, y)| run(i, y, opt.screen_evals, "screen"))
        .collect();
    let mut log: Vec<LogEntry> = screened.iter().map(|s| s.2.clone()).collect();
    let mut evaluations: usize = log.iter().map(|l| l.evaluations).sum();
    let (best_start, best) = screened
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .map(|(i, s)| (i, s.clone()))
        .unwrap();
    if !best.1.is_finite() {
        return Err(Error::NonConvergence {
            method: "calibration",
            detail: format!("pricing failed at every one of {} starts", starts.len()),
        });
    }
    let remaining = opt.max_evals.saturating_sub(evaluations);
    let (mut y, mut fy) = (best.0, best.1);
    if remaining > 0 {
        let (y2, f2, entry) = run(best_start, &y, remaining, "final");
        evaluations += entry.evaluations;
        log.push(entry);
        if f2 <= fy {
            y = y2;
            fy = f2;
        }
    }
    let mut theta_star = to_params(&y);
    // a start that was already optimal is never made worse
    if initial_objective <= fy {
        theta_star = initial.clone();
        fy = initial_objective;
    }
    let residuals = residuals(&theta_star, quotes, cfg)?;
    let atm: Vec<bool> = quotes.quotes.iter().map(|q| q.is_atm(&quotes.curve)).collect();
    Ok(CalibResult {
        theta_star,
        objective: fy,
        initial_objective,
        space: opt.space,
        errors: error_report_from(&residuals, &atm),
        residuals,
        log,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halton_points_fill_the_cube() {
        let pts = scrambled_halton(3, 64, 1);
        assert!(pts.iter().flatten().all(|&x| (0.0..1.0).contains(&x)));
        for d in 0..3 {
            let mean: f64 = pts.iter().map(|p| p[d]).sum::<f64>() / 64.0;
            assert!((mean - 0.5).abs() < 0.05, "{mean}");
        }
        assert_eq!(pts, scrambled_halton(3, 64, 1));
    }

    #[test]
    fn nelder_mead_finds_a_quadratic_minimum() {
        let target = [0.3, 0.7, 0.5];
        let mut f = |y: &[f64]| y.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let opt = OptimizerConfig::default();
        let (y, fy, _) = minimize(&[0.9, 0.1, 0.9], 5000, &opt, &mut f);
        assert!(fy < 1e-15, "{fy}");
        assert!(y.iter().zip(&target).all(|(a, b)| (a - b).abs() < 1e-7));
    }

    #[test]
    fn projection_keeps_iterates_in_the_box() {
        // unconstrained minimum outside the box: the answer is the face
        let mut f = |y: &[f64]| (y[0] - 1.5).powi(2) + (y[1] - 0.4).powi(2);
        let (y, _, _) = minimize(&[0.2, 0.2], 4000, &OptimizerConfig::default(), &mut f);
        assert!((y[0] - 1.0).abs() < 1e-8 && (y[1] - 0.4).abs() < 1e-6, "{y:?}");
    }
}
