//! Vanilla and calendar spread option pricing.
//!
//! Vanilla options are priced by the two in-the-money probabilities
//! recovered from the characteristic function. Calendar spreads
//! `(F(T,T1) - F(T,T2) - K)^+` have three Fourier engines: a
//! one-dimensional lower-bound formula (exact for `K = 0` under joint
//! log-normality), the two-dimensional transform of the spread payoff on an
//! FFT lattice, and single integrals of the joint distribution function.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::charfn::CFContext;
use crate::error::{Error, Result};
use crate::model::{CsoContract, FuturesCurve, ModelParams, NumericsConfig, OptionKind, VanillaContract};
use crate::specfun::ln_gamma_complex;
use crate::transforms::{
    gauss_legendre, joint_cdf_spectrum, leg_moments, quad_interval, Lattice, Leg, QuadSettings, Spectrum2D,
    GRID_HALF_WIDTH_SD,
};

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Tolerance on the in-the-money probabilities before clamping.
const PROB_SLACK: f64 = 1e-4;
/// Most negative put accepted from parity before it is an error.
const PARITY_SLACK: f64 = 1e-8;
/// Upper limit of the spread-formula integral.
const CF_GAMMA_MAX: f64 = 200.0;
/// Gate between successive node doublings of the spread-formula integral.
const CF_REFINE_TOL: f64 = 1e-6;
/// Largest integrand magnitude allowed at the ends of the single-integral range.
const SI_TAIL_BUDGET: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Black76,
    Margrabe,
    Fourier,
    Parity,
    CaldanaFusai,
    HurdZhou,
    SingleIntegral,
    GaussianCopula,
    MonteCarlo,
}

impl Method {
    /// Short tag used in CSV output and on the command line.
    pub fn tag(self) -> &'static str {
        match self {
            Method::Black76 => "black76",
            Method::Margrabe => "margrabe",
            Method::Fourier => "fourier",
            Method::Parity => "parity",
            Method::CaldanaFusai => "cf",
            Method::HurdZhou => "hz",
            Method::SingleIntegral => "si",
            Method::GaussianCopula => "copula",
            Method::MonteCarlo => "mc",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PriceResult {
    pub price: f64,
    pub method: Method,
    /// Monte Carlo standard error, when there is one.
    pub stderr: Option<f64>,
    pub diagnostics: BTreeMap<String, f64>,
}

impl PriceResult {
    pub fn new(price: f64, method: Method) -> Self {
        Self {
            price,
            method,
            stderr: None,
            diagnostics: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.diagnostics.insert(key.to_string(), value);
        self
    }
}

/// Standard normal distribution function.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Black-76 price of an option on a futures price.
pub fn black76(f: f64, k: f64, t: f64, vol: f64, r: f64, kind: OptionKind) -> f64 {
    let d = (-r * t).exp();
    let sd = vol * t.max(0.0).sqrt();
    if !(sd > 0.0) || !(k > 0.0) {
        return d * match kind {
            OptionKind::Call => (f - k).max(0.0),
            OptionKind::Put => (k - f).max(0.0),
        };
    }
    let d1 = ((f / k).ln() + 0.5 * sd * sd) / sd;
    let d2 = d1 - sd;
    match kind {
        OptionKind::Call => d * (f * norm_cdf(d1) - k * norm_cdf(d2)),
        OptionKind::Put => d * (k * norm_cdf(-d2) - f * norm_cdf(-d1)),
    }
}

/// Exchange option `E[(F1 - F2)^+]`, discounted, for jointly log-normal
/// legs whose log-ratio has total variance `var`.
pub fn margrabe(f1: f64, f2: f64, var: f64, discount: f64) -> f64 {
    if !(var > 0.0) {
        return discount * (f1 - f2).max(0.0);
    }
    let sd = var.sqrt();
    let d1 = ((f1 / f2).ln() + 0.5 * var) / sd;
    discount * (f1 * norm_cdf(d1) - f2 * norm_cdf(d1 - sd))
}

/// `P = C - e^{-rT}(F - K)`.
pub fn put_from_parity(call: f64, curve: &FuturesCurve, contract: &VanillaContract) -> Result<PriceResult> {
    let f = curve.price(contract.futures_maturity);
    let d = (-contract.rate * contract.expiry).exp();
    let put = call - d * (f - contract.strike);
    if put < -PARITY_SLACK {
        return Err(Error::numerical(format!("parity gives a negative put {put:.3e}")));
    }
    Ok(PriceResult::new(put.max(0.0), Method::Parity).with("call", call))
}

/// Collects the first error raised inside a quadrature integrand, which can
/// only return numbers.
struct Trap(RefCell<Option<Error>>);

impl Trap {
    fn new() -> Self {
        Trap(RefCell::new(None))
    }

    fn take(&self, r: Result<Complex64>) -> Complex64 {
        match r {
            Ok(v) => v,
            Err(e) => {
                self.0.borrow_mut().get_or_insert(e);
                Complex64::new(f64::NAN, 0.0)
            }
        }
    }

    fn check<T>(&self, r: Result<T>) -> Result<T> {
        match self.0.borrow_mut().take() {
            Some(e) => Err(e),
            None => r,
        }
    }
}

fn vanilla_context(model: &ModelParams, contract: &VanillaContract, cfg: &NumericsConfig) -> Result<CFContext> {
    let tm = contract.futures_maturity;
    Ok(CFContext::new(model.clone(), contract.expiry, tm, tm)?.with_backend(cfg.cf_backend))
}

fn check_probability(name: &str, p: f64) -> Result<f64> {
    if !(p >= -PROB_SLACK && p <= 1.0 + PROB_SLACK) {
        return Err(Error::numerical(format!("{name} = {p} is not a probability")));
    }
    Ok(p.clamp(0.0, 1.0))
}

fn vanilla_from_probabilities(f: f64, k: f64, d: f64, pi1: f64, pi2: f64, kind: OptionKind) -> f64 {
    let p = match kind {
        OptionKind::Call => d * (f * pi1 - k * pi2),
        OptionKind::Put => d * (k * (1.0 - pi2) - f * (1.0 - pi1)),
    };
    p.max(0.0)
}

/// Vanilla option by the two in-the-money probabilities `Pi1` (share
/// measure) and `Pi2` (forward measure). Both integrals run in one complex
/// quadrature: the real part carries `Pi1`, the imaginary part `Pi2`.
pub fn price_vanilla_fourier(
    model: &ModelParams,
    curve: &FuturesCurve,
    contract: &VanillaContract,
    cfg: &NumericsConfig,
) -> Result<PriceResult> {
    contract.validate()?;
    let ctx = vanilla_context(model, contract, cfg)?;
    let f = curve.price(contract.futures_maturity);
    let k = (contract.strike / f).ln();
    let zero = Complex64::new(0.0, 0.0);
    let norm = ctx.phi(-I, zero)?;
    let trap = Trap::new();
    let integrand = |u: f64| {
        let z = Complex64::new(u, 0.0);
        let shifted = trap.take(ctx.phi(z - I, zero)) / norm;
        let plain = trap.take(ctx.phi(z, zero));
        let rot = Complex64::cis(-u * k) / (I * u);
        Complex64::new((rot * shifted).re, (rot * plain).re)
    };
    let settings = QuadSettings::from_config(cfg);
    let mut upper = cfg.quad_upper_limit;
    let mut r = quad_interval(&integrand, 0.0, upper, &settings);
    // Short expiries decay slowly; extend the range a few times before
    // accepting a visible tail.
    for _ in 0..3 {
        match &r {
            Ok(q) if integrand(upper).norm() * upper > cfg.quad_tolerance => {
                let ext = quad_interval(&integrand, upper, 2.0 * upper, &settings).map(|e| {
                    let mut q2 = *q;
                    q2.value += e.value;
                    q2.error_estimate += e.error_estimate;
                    q2.panels += e.panels;
                    q2
                });
                upper *= 2.0;
                r = ext;
            }
            _ => break,
        }
    }
    let q = trap.check(r)?;
    let tail = integrand(upper).norm() * upper;
    let pi1 = check_probability("Pi1", 0.5 + q.value.re / PI)?;
    let pi2 = check_probability("Pi2", 0.5 + q.value.im / PI)?;
    let d = (-contract.rate * contract.expiry).exp();
    let price = vanilla_from_probabilities(f, contract.strike, d, pi1, pi2, contract.kind);
    Ok(PriceResult::new(price, Method::Fourier)
        .with("pi1", pi1)
        .with("pi2", pi2)
        .with("upper_limit", upper)
        .with("quad_error", q.error_estimate)
        .with("tail_estimate", tail)
        .with("panels", q.panels as f64))
}

/// Fixed-node vanilla pricer for one `(T, T_m)` slice: the characteristic
/// function is sampled once and reused for every strike, which is what a
/// calibration loop needs. Uses the single-integral form
/// `C = D (F - sqrt(F K) / pi int_0^inf Re[e^{i u ln(F/K)} phi(u - i/2)] / (u^2 + 1/4) du)`,
/// which needs one characteristic-function value per node.
#[derive(Debug, Clone)]
pub struct VanillaSlice {
    pub expiry: f64,
    pub futures_maturity: f64,
    pub forward: f64,
    pub discount: f64,
    nodes: Vec<f64>,
    /// Quadrature weight times `phi(u - i/2) / (u^2 + 1/4)`.
    values: Vec<Complex64>,
}

impl VanillaSlice {
    /// Panel width and order of the composite rule; resolves `e^{iuk}` for
    /// `|ln K/F|` up to about 3.
    const PANEL: f64 = 4.0;
    const NODES: usize = 16;
    const CUTOFF: f64 = 1e-14;

    pub fn new(
        model: &ModelParams,
        curve: &FuturesCurve,
        expiry: f64,
        futures_maturity: f64,
        rate: f64,
        cfg: &NumericsConfig,
    ) -> Result<Self> {
        let probe = VanillaContract {
            expiry,
            futures_maturity,
            strike: 1.0,
            kind: OptionKind::Call,
            rate,
        };
        probe.validate()?;
        let ctx = vanilla_context(model, &probe, cfg)?;
        let zero = Complex64::new(0.0, 0.0);
        let (gx, gw) = gauss_legendre(Self::NODES);
        let mut nodes = Vec::new();
        let mut values = Vec::new();
        // Graded panels near the origin keep the poles of 1/(u^2 + 1/4) at
        // +-i/2 away from each panel; after that, add panels until a whole
        // panel sits below the cutoff.
        let mut start = 0.0;
        while start < cfg.quad_upper_limit {
            let h = if start < Self::PANEL { start.max(0.5) } else { Self::PANEL };
            let panel: Vec<(f64, Complex64)> = gx
                .par_iter()
                .map(|x| {
                    let u = start + 0.5 * h * (1.0 + x);
                    Ok((u, ctx.phi(Complex64::new(u, -0.5), zero)? / (u * u + 0.25)))
                })
                .collect::<Result<_>>()?;
            let size = panel.iter().map(|(_, g)| g.norm()).fold(0.0, f64::max);
            for ((u, g), w) in panel.into_iter().zip(&gw) {
                nodes.push(u);
                values.push(g * (0.5 * h * w));
            }
            start += h;
            if size < Self::CUTOFF {
                break;
            }
        }
        Ok(Self {
            expiry,
            futures_maturity,
            forward: curve.price(futures_maturity),
            discount: (-rate * expiry).exp(),
            nodes,
            values,
        })
    }

    pub fn price(&self, strike: f64, kind: OptionKind) -> Result<f64> {
        if !(strike > 0.0) {
            return Err(Error::invalid(format!("strike {strike} must be positive")));
        }
        let f = self.forward;
        let k = (f / strike).ln();
        let integral: f64 = self
            .nodes
            .iter()
            .zip(&self.values)
            .map(|(&u, g)| (Complex64::cis(u * k) * g).re)
            .sum();
        let call = f - (f * strike).sqrt() / PI * integral;
        let (lo, hi) = ((f - strike).max(0.0), f);
        if !(call >= lo - PARITY_SLACK * f && call <= hi + PARITY_SLACK * f) {
            return Err(Error::numerical(format!(
                "call value {call} outside [{lo}, {hi}] at strike {strike}"
            )));
        }
        let call = call.clamp(lo, hi);
        Ok(self.discount
            * match kind {
                OptionKind::Call => call,
                OptionKind::Put => call - (f - strike),
            })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }
}

// ---------------------------------------------------------------------------
// Calendar spreads

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CsoMethod {
    CaldanaFusai,
    HurdZhou,
    SingleIntegral,
}

impl CsoMethod {
    pub fn method(self) -> Method {
        match self {
            CsoMethod::CaldanaFusai => Method::CaldanaFusai,
            CsoMethod::HurdZhou => Method::HurdZhou,
            CsoMethod::SingleIntegral => Method::SingleIntegral,
        }
    }
}

fn cso_context(model: &ModelParams, t: f64, t1: f64, t2: f64, cfg: &NumericsConfig) -> Result<CFContext> {
    Ok(CFContext::new(model.clone(), t, t1, t2)?.with_backend(cfg.cf_backend))
}

/// Forward value of the spread, `e^{-rT}(F1 - F2 - K)`; the call minus put.
pub fn cso_parity(curve: &FuturesCurve, cso: &CsoContract) -> f64 {
    cso.discount() * (curve.price(cso.t1) - curve.price(cso.t2) - cso.strike)
}

fn finish_cso(mut call: PriceResult, curve: &FuturesCurve, cso: &CsoContract, kind: OptionKind) -> PriceResult {
    if kind == OptionKind::Put {
        call.diagnostics.insert("call".into(), call.price);
        call.price = (call.price - cso_parity(curve, cso)).max(0.0);
    }
    call
}

/// Calendar spread call by the one-dimensional lower-bound formula; puts
/// follow from parity. Strikes with `F2 + K <= 0` are priced on the reverse
/// spread.
pub fn price_cso_caldana_fusai(
    model: &ModelParams,
    curve: &FuturesCurve,
    cso: &CsoContract,
    delta: f64,
    cfg: &NumericsConfig,
) -> Result<PriceResult> {
    cso.validate()?;
    if !(delta > 0.0) {
        return Err(Error::invalid(format!("damping delta must be positive, got {delta}")));
    }
    let (f1, f2) = (curve.price(cso.t1), curve.price(cso.t2));
    let call = if f2 + cso.strike > 0.0 {
        let ctx = cso_context(model, cso.expiry, cso.t1, cso.t2, cfg)?;
        caldana_fusai_call(&ctx, f1, f2, cso.strike, cso.discount(), delta)?
    } else {
        // Original call = reverse put at -K = reverse call - parity.
        let ctx = cso_context(model, cso.expiry, cso.t2, cso.t1, cfg)?;
        let mut rev = caldana_fusai_call(&ctx, f2, f1, -cso.strike, cso.discount(), delta)?;
        rev.price = (rev.price - cso.discount() * (f2 - f1 + cso.strike)).max(0.0);
        rev.with("reverse_spread", 1.0)
    };
    Ok(finish_cso(call, curve, cso, cso.kind))
}

fn caldana_fusai_call(ctx: &CFContext, f1: f64, f2: f64, strike: f64, discount: f64, delta: f64) -> Result<PriceResult> {
    let alpha = f2 / (f2 + strike);
    if !(alpha.is_finite() && alpha > 0.0 && alpha < 1e6) {
        return Err(Error::invalid(format!("F2 + K = {} is too close to zero", f2 + strike)));
    }
    let k = (f2 + strike).ln();
    let zero = Complex64::new(0.0, 0.0);
    // ln E[F2^alpha] is real, so no branch choice arises.
    let moment = ctx.phi(zero, Complex64::new(0.0, -alpha))?;
    if !(moment.re > 0.0) || !moment.is_finite() {
        return Err(Error::numerical(format!("E[F2^alpha] = {moment} is not a positive number")));
    }
    let l = alpha * f2.ln() + moment.re.ln();
    let big_phi = |u1: Complex64, u2: Complex64| -> Result<Complex64> {
        Ok(ctx.phi(u1, u2)? * (I * (u1 * f1.ln() + u2 * f2.ln())).exp())
    };
    let trap = Trap::new();
    let integrand = |g: f64| -> Complex64 {
        let zeta = Complex64::new(g, -delta);
        let v = -alpha * zeta;
        let a = trap.take(big_phi(zeta - I, v));
        let b = trap.take(big_phi(zeta, v - I));
        let c = trap.take(big_phi(zeta, v));
        let psi = (I * zeta * l).exp() / (I * zeta) * (a - b - strike * c);
        Complex64::new((Complex64::cis(-g * k) * psi).re, 0.0)
    };
    // Log-spaced Gauss-Legendre panels, doubled until the result settles.
    let mut panels = 63;
    let mut prev = composite_log_panels(&integrand, CF_GAMMA_MAX, panels);
    let mut change = f64::INFINITY;
    let mut value = prev;
    for _ in 0..5 {
        panels *= 2;
        value = composite_log_panels(&integrand, CF_GAMMA_MAX, panels);
        change = (value - prev).abs();
        if change < CF_REFINE_TOL || !value.is_finite() {
            break;
        }
        prev = value;
    }
    let value = trap.check(Ok(value))?;
    if !value.is_finite() {
        return Err(Error::numerical("spread integrand is not finite"));
    }
    if change >= CF_REFINE_TOL {
        return Err(Error::NonConvergence {
            method: "spread Fourier integral",
            detail: format!("node doubling still changes the value by {change:.2e}"),
        });
    }
    let scale = discount * (-delta * k).exp() / PI;
    let tail = integrand(CF_GAMMA_MAX).re.abs() * scale * CF_GAMMA_MAX;
    let price = (scale * value).max(0.0);
    Ok(PriceResult::new(price, Method::CaldanaFusai)
        .with("alpha", alpha)
        .with("delta", delta)
        .with("shift_a", (delta + 1.0).hypot(alpha * delta))
        .with("shift_b", delta.hypot(alpha * delta + 1.0))
        .with("shift_c", delta.hypot(alpha * delta))
        .with("nodes", (panels * 16) as f64)
        .with("refinement_change", scale * change)
        .with("tail_estimate", tail))
}

/// Gauss-Legendre (16 nodes per panel) on `[0, upper]` with one panel on
/// `[0, 0.1]` and the rest log-spaced.
fn composite_log_panels(f: &impl Fn(f64) -> Complex64, upper: f64, panels: usize) -> f64 {
    let (gx, gw) = gauss_legendre(16);
    let first = 0.1;
    let ratio = (upper / first).powf(1.0 / (panels - 1) as f64);
    let mut edges = vec![0.0, first];
    for i in 1..panels {
        edges.push(first * ratio.powi(i as i32));
    }
    *edges.last_mut().unwrap() = upper;
    edges
        .windows(2)
        .map(|e| {
            let (mid, half) = (0.5 * (e[0] + e[1]), 0.5 * (e[1] - e[0]));
            gx.iter().zip(&gw).map(|(x, w)| w * f(mid + half * x).re).sum::<f64>() * half
        })
        .sum()
}

/// Hurd-Zhou spread-payoff transform at `u + i eps`:
/// `Gamma(i(u1 + u2) - 1) Gamma(-i u2) / Gamma(i u1 + 1)`.
pub fn spread_payoff_transform(u1: Complex64, u2: Complex64) -> Result<Complex64> {
    let a = ln_gamma_complex(I * (u1 + u2) - 1.0)?;
    let b = ln_gamma_complex(-I * u2)?;
    let c = ln_gamma_complex(I * u1 + 1.0)?;
    Ok((a + b - c).exp())
}

/// Prices of the unit-strike spread call on a lattice of initial log-prices
/// `(ln F1/K, ln F2/K)`, from one two-dimensional FFT.
#[derive(Debug, Clone)]
pub struct HurdZhouGrid {
    lattice: Lattice,
    epsilon: [f64; 2],
    discount: f64,
    /// Conjugate-grid log-prices along each leg.
    x1: Vec<f64>,
    x2: Vec<f64>,
    /// Unit-strike prices, row-major over `(x1, x2)`.
    values: Vec<f64>,
    /// Integrand `phi(u + i eps) P(u + i eps)` row-major over `(m1, m2)`.
    g: Vec<Complex64>,
}

impl HurdZhouGrid {
    /// Builds the lattice so that `center` is a node.
    pub fn new(ctx: &CFContext, center: (f64, f64), discount: f64, lattice: Lattice, epsilon: [f64; 2]) -> Result<Self> {
        let [e1, e2] = epsilon;
        if !(e2 > 0.0 && e1 + e2 < -1.0) {
            return Err(Error::invalid(format!(
                "contour shift ({e1}, {e2}) is outside the payoff strip (need eps2 > 0, eps1 + eps2 < -1)"
            )));
        }
        let n = lattice.size;
        let half = n / 2;
        let du = lattice.du;
        let u = |m: usize| (m as f64 - half as f64) * du;
        let eval = |m1: usize, m2: usize| -> Result<Complex64> {
            let z1 = Complex64::new(u(m1), e1);
            let z2 = Complex64::new(u(m2), e2);
            Ok(ctx.phi(z1, z2)? * spread_payoff_transform(z1, z2)?)
        };
        // Half plane m1 >= N/2; the rest follows from h(-u) = conj h(u).
        let rows: Vec<Vec<Complex64>> = (half..n)
            .into_par_iter()
            .map(|m1| {
                let start = if m1 == half { half } else { 1 };
                (start..n).map(|m2| eval(m1, m2)).collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let mut g = vec![Complex64::new(0.0, 0.0); n * n];
        for (r, row) in rows.iter().enumerate() {
            let m1 = half + r;
            let start = if m1 == half { half } else { 1 };
            for (c, v) in row.iter().enumerate() {
                let m2 = start + c;
                g[m1 * n + m2] = *v;
                g[(n - m1) * n + (n - m2)] = v.conj();
            }
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("spread transform integrand is not finite on the lattice"));
        }

        // sum_m g_m e^{i u_m x_j} with x_j = c + (j - N/2) dx equals
        // (-1)^j IFFT[g_m e^{i u_m c} (-1)^m]_j when N is a multiple of 4.
        let dx = lattice.dx();
        let sign = |m: usize| if m % 2 == 0 { 1.0 } else { -1.0 };
        let mut buf: Vec<Complex64> = (0..n * n)
            .map(|idx| {
                let (m1, m2) = (idx / n, idx % n);
                g[idx] * Complex64::cis(u(m1) * center.0 + u(m2) * center.1) * sign(m1 + m2)
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_inverse(n);
        for row in buf.chunks_mut(n) {
            fft.process(row);
        }
        let mut col = vec![Complex64::new(0.0, 0.0); n];
        for j in 0..n {
            for i in 0..n {
                col[i] = buf[i * n + j];
            }
            fft.process(&mut col);
            for i in 0..n {
                buf[i * n + j] = col[i];
            }
        }
        let x1: Vec<f64> = (0..n).map(|j| center.0 + (j as f64 - half as f64) * dx).collect();
        let x2: Vec<f64> = (0..n).map(|j| center.1 + (j as f64 - half as f64) * dx).collect();
        let norm = discount * du * du / (4.0 * PI * PI);
        let values = (0..n * n)
            .map(|idx| {
                let (j1, j2) = (idx / n, idx % n);
                norm * (-e1 * x1[j1] - e2 * x2[j2]).exp() * sign(j1 + j2) * buf[idx].re
            })
            .collect();
        Ok(Self {
            lattice,
            epsilon,
            discount,
            x1,
            x2,
            values,
            g,
        })
    }

    pub fn lattice(&self) -> Lattice {
        self.lattice
    }

    pub fn log_price_axes(&self) -> (&[f64], &[f64]) {
        (&self.x1, &self.x2)
    }

    /// Unit-strike price at lattice node `(j1, j2)`.
    pub fn at(&self, j1: usize, j2: usize) -> f64 {
        self.values[j1 * self.lattice.size + j2]
    }

    /// Unit-strike price at arbitrary log-prices by direct summation of the
    /// lattice integral (no interpolation error).
    pub fn unit_price(&self, x1: f64, x2: f64) -> f64 {
        let n = self.lattice.size;
        let half = (n / 2) as f64;
        let du = self.lattice.du;
        let e2: Vec<Complex64> = (0..n).map(|m| Complex64::cis((m as f64 - half) * du * x2)).collect();
        let s: f64 = (1..n)
            .map(|m1| {
                let row = &self.g[m1 * n..(m1 + 1) * n];
                let inner: Complex64 = row.iter().zip(&e2).map(|(a, b)| a * b).sum();
                (inner * Complex64::cis((m1 as f64 - half) * du * x1)).re
            })
            .sum();
        let [e1, e2] = self.epsilon;
        self.discount * du * du / (4.0 * PI * PI) * (-e1 * x1 - e2 * x2).exp() * s
    }

    /// `K * P(ln F1/K, ln F2/K)` by direct summation.
    pub fn price(&self, f1: f64, f2: f64, strike: f64) -> Result<f64> {
        if !(strike > 0.0 && f1 > 0.0 && f2 > 0.0) {
            return Err(Error::invalid("spread lattice prices need positive prices and strike"));
        }
        Ok((strike * self.unit_price((f1 / strike).ln(), (f2 / strike).ln())).max(0.0))
    }

    /// `K * P(ln F1/K, ln F2/K)` by bilinear interpolation on the FFT output.
    pub fn interpolate(&self, f1: f64, f2: f64, strike: f64) -> Result<f64> {
        if !(strike > 0.0 && f1 > 0.0 && f2 > 0.0) {
            return Err(Error::invalid("spread lattice prices need positive prices and strike"));
        }
        let (a, b) = ((f1 / strike).ln(), (f2 / strike).ln());
        let n = self.lattice.size;
        let dx = self.lattice.dx();
        let locate = |x: f64, axis: &[f64]| -> Result<(usize, f64)> {
            let s = (x - axis[0]) / dx;
            if !(s >= 0.0 && s <= (n - 1) as f64) {
                return Err(Error::invalid(format!("log-price {x:.4} is outside the computed lattice")));
            }
            let i = (s.floor() as usize).min(n - 2);
            Ok((i, s - i as f64))
        };
        let (i, s) = locate(a, &self.x1)?;
        let (j, t) = locate(b, &self.x2)?;
        let v = (1.0 - s) * (1.0 - t) * self.at(i, j)
            + s * (1.0 - t) * self.at(i + 1, j)
            + (1.0 - s) * t * self.at(i, j + 1)
            + s * t * self.at(i + 1, j + 1);
        Ok((strike * v).max(0.0))
    }
}

/// Calendar spread by the two-dimensional payoff transform. The lattice is
/// centred on the contract's own log-moneyness, so its price is a lattice
/// node. Negative strikes are priced on the reverse spread; `K = 0` is not
/// covered by the transform.
pub fn price_cso_hurd_zhou(
    model: &ModelParams,
    curve: &FuturesCurve,
    cso: &CsoContract,
    cfg: &NumericsConfig,
) -> Result<PriceResult> {
    Ok(price_cso_hurd_zhou_ladder(model, curve, cso, &[cso.strike], cfg)?.remove(0))
}

/// Strike ladder on one or two lattices (one per strike sign).
pub fn price_cso_hurd_zhou_ladder(
    model: &ModelParams,
    curve: &FuturesCurve,
    cso: &CsoContract,
    strikes: &[f64],
    cfg: &NumericsConfig,
) -> Result<Vec<PriceResult>> {
    cso.validate()?;
    if strikes.iter().any(|k| *k == 0.0 || !k.is_finite()) {
        return Err(Error::invalid("the spread-payoff transform needs a finite non-zero strike"));
    }
    let lattice = Lattice::new(cfg.hz_size, cfg.hz_du)?;
    let (f1, f2) = (curve.price(cso.t1), curve.price(cso.t2));
    let d = cso.discount();
    let build = |reverse: bool, ks: &[f64]| -> Result<Option<HurdZhouGrid>> {
        if ks.is_empty() {
            return Ok(None);
        }
        let (a, b, ta, tb) = if reverse { (f2, f1, cso.t2, cso.t1) } else { (f1, f2, cso.t1, cso.t2) };
        let mut sorted: Vec<f64> = ks.iter().map(|k| k.abs()).collect();
        sorted.sort_by(f64::total_cmp);
        let kc = sorted[sorted.len() / 2];
        let ctx = cso_context(model, cso.expiry, ta, tb, cfg)?;
        HurdZhouGrid::new(&ctx, ((a / kc).ln(), (b / kc).ln()), d, lattice, cfg.hz_epsilon).map(Some)
    };
    let pos: Vec<f64> = strikes.iter().copied().filter(|k| *k > 0.0).collect();
    let neg: Vec<f64> = strikes.iter().copied().filter(|k| *k < 0.0).collect();
    let fwd = build(false, &pos)?;
    let rev = build(true, &neg)?;
    strikes
        .par_iter()
        .map(|&k| {
            let this = cso.with_strike(k);
            let (call, reverse) = if k > 0.0 {
                (fwd.as_ref().unwrap().price(f1, f2, k)?, false)
            } else {
                // Original call = reverse put at -K = reverse call - parity.
                let rc = rev.as_ref().unwrap().price(f2, f1, -k)?;
                ((rc - d * (f2 - f1 + k)).max(0.0), true)
            };
            let r = PriceResult::new(call, Method::HurdZhou)
                .with("lattice_size", lattice.size as f64)
                .with("lattice_du", lattice.du)
                .with("eps1", cfg.hz_epsilon[0])
                .with("eps2", cfg.hz_epsilon[1])
                .with("reverse_spread", if reverse { 1.0 } else { 0.0 });
            Ok(finish_cso(r, curve, &this, this.kind))
        })
        .collect()
}

/// Joint distribution of the two price levels, `G(p, q) = P(F1 <= p, F2 <= q)`,
/// backed by the sheared-lattice joint CDF of the log-returns.
///
/// The lattice sum is periodic, so points far off the regression line of
/// one leg on the other (e.g. `F1` tiny, `F2` huge) alias. Queries are
/// therefore pulled back to within 12 conditional standard deviations of
/// the regression line, where `G` has already reached its limit. The
/// marginals are read off the same lattice at the upper edge, so
/// differences like `G2(x) - G(x + K, x)` vanish exactly where they should.
struct PriceLevelCdf {
    spectrum: Spectrum2D,
    f: (f64, f64),
    mean: (f64, f64),
    lo: (f64, f64),
    hi: (f64, f64),
    /// Regression slopes of leg 1 on leg 2 and of leg 2 on leg 1.
    beta: (f64, f64),
    /// Conditional standard deviations, floored like the lattice shear.
    cond_sd: (f64, f64),
}

impl PriceLevelCdf {
    fn new(ctx: &CFContext, f1: f64, f2: f64, cfg: &NumericsConfig) -> Result<Self> {
        let spectrum = joint_cdf_spectrum(ctx, cfg.smoothing_a1, cfg.smoothing_a2, Lattice::default_2d(cfg).refined())?;
        let (m1, s1) = leg_moments(ctx, Leg::First);
        let (m2, s2) = leg_moments(ctx, Leg::Second);
        let (t, t1, t2) = ctx.maturities();
        let c12 = ctx.model().expected_covariance(t, t1, t2);
        let (c11, c22) = (s1 * s1, s2 * s2);
        let w = GRID_HALF_WIDTH_SD;
        let cond = |v: f64| (v - c12 * c12 / (c11 * c22) * v).max(0.09 * v).sqrt();
        Ok(Self {
            spectrum,
            f: (f1, f2),
            mean: (m1, m2),
            lo: (m1 - w * s1, m2 - w * s2),
            hi: (m1 + w * s1, m2 + w * s2),
            beta: (c12 / c22, c12 / c11),
            cond_sd: (cond(c11), cond(c22)),
        })
    }

    /// Log-return coordinates of `(p, q)` after clamping.
    fn point(&self, p: f64, q: f64) -> (f64, f64) {
        let w = GRID_HALF_WIDTH_SD;
        let log = |v: f64, f: f64, lo: f64, hi: f64| if v <= 0.0 { lo } else { (v / f).ln().clamp(lo, hi) };
        let x = log(p, self.f.0, self.lo.0, self.hi.0);
        let y = log(q, self.f.1, self.lo.1, self.hi.1);
        // Beyond these the conditional law has no mass; for a negative
        // slope the bound is taken at the far end of the other leg.
        let top = |m: f64, beta: f64, other: f64, other_mean: f64, other_lo: f64, sd: f64| {
            let dev = if beta >= 0.0 { other - other_mean } else { other_lo - other_mean };
            m + beta * dev + w * sd
        };
        let x = x.min(top(self.mean.0, self.beta.0, y, self.mean.1, self.lo.1, self.cond_sd.0));
        let y = y.min(top(self.mean.1, self.beta.1, x, self.mean.0, self.lo.0, self.cond_sd.1));
        (x, y)
    }

    fn eval(&self, pts: &[(f64, f64)]) -> Vec<f64> {
        let (xs, ys): (Vec<f64>, Vec<f64>) = pts.iter().map(|&(p, q)| self.point(p, q)).unzip();
        self.spectrum.eval_pairs(&xs, &ys)
    }

    /// Price-level ends of the trusted box.
    fn range1(&self) -> (f64, f64) {
        (self.f.0 * self.lo.0.exp(), self.f.0 * self.hi.0.exp())
    }

    fn range2(&self) -> (f64, f64) {
        (self.f.1 * self.lo.1.exp(), self.f.1 * self.hi.1.exp())
    }

    /// `G2(q) - G(p(q), q)` for each `q`.
    fn second_minus_joint(&self, qs: &[f64], p: impl Fn(f64) -> f64) -> Vec<f64> {
        let mut pts: Vec<(f64, f64)> = qs.iter().map(|&q| (f64::INFINITY, q)).collect();
        pts.extend(qs.iter().map(|&q| (p(q), q)));
        let v = self.eval(&pts);
        let n = qs.len();
        (0..n).map(|i| v[i] - v[n + i]).collect()
    }

    /// `G1(p) - G(p, q(p))` for each `p`.
    fn first_minus_joint(&self, ps: &[f64], q: impl Fn(f64) -> f64) -> Vec<f64> {
        let mut pts: Vec<(f64, f64)> = ps.iter().map(|&p| (p, f64::INFINITY)).collect();
        pts.extend(ps.iter().map(|&p| (p, q(p))));
        let v = self.eval(&pts);
        let n = ps.len();
        (0..n).map(|i| v[i] - v[n + i]).collect()
    }

    fn first(&self, ps: &[f64]) -> Vec<f64> {
        let pts: Vec<(f64, f64)> = ps.iter().map(|&p| (p, f64::INFINITY)).collect();
        self.eval(&pts)
    }
}

/// Composite Gauss-Legendre nodes in `s = ln x` over `[ln a, ln b]`, with
/// weights including the Jacobian `x`.
fn log_nodes(a: f64, b: f64, panels: usize) -> (Vec<f64>, Vec<f64>) {
    let (gx, gw) = gauss_legendre(16);
    let (la, lb) = (a.ln(), b.ln());
    let h = (lb - la) / panels as f64;
    let mut x = Vec::with_capacity(panels * 16);
    let mut w = Vec::with_capacity(panels * 16);
    for p in 0..panels {
        let mid = la + (p as f64 + 0.5) * h;
        for (t, wt) in gx.iter().zip(&gw) {
            let s = mid + 0.5 * h * t;
            x.push(s.exp());
            w.push(0.5 * h * wt * s.exp());
        }
    }
    (x, w)
}

const SI_PANELS: usize = 48;

struct SiIntegral {
    value: f64,
    refine: f64,
    /// Integrand at the lower and upper ends.
    ends: (f64, f64),
}

/// `int_a^b f` over log-spaced panels, with a half-panel-count comparison
/// as error estimate and the integrand size at both ends.
fn si_integrate(a: f64, b: f64, f: impl Fn(&[f64]) -> Vec<f64>) -> SiIntegral {
    if !(b > a) {
        return SiIntegral {
            value: 0.0,
            refine: 0.0,
            ends: (0.0, 0.0),
        };
    }
    let (x, w) = log_nodes(a, b, SI_PANELS);
    let (xc, wc) = log_nodes(a, b, SI_PANELS / 2);
    let mut pts = x.clone();
    pts.extend_from_slice(&xc);
    pts.push(a);
    pts.push(b);
    let v = f(&pts);
    let n = x.len();
    let fine: f64 = (0..n).map(|i| w[i] * v[i]).sum();
    let coarse: f64 = (0..xc.len()).map(|i| wc[i] * v[n + i]).sum();
    let m = pts.len();
    SiIntegral {
        value: fine,
        refine: (fine - coarse).abs(),
        ends: (v[m - 2], v[m - 1]),
    }
}

/// Call and put at `K >= 0` on the forward spread.
fn single_integral_pair(cdf: &PriceLevelCdf, strike: f64) -> Result<(f64, f64, f64, f64)> {
    let (lo1, hi1) = cdf.range1();
    let (lo2, hi2) = cdf.range2();
    // Call: int_0^inf [G2(x) - G(x + K, x)] dx; the integrand vanishes below
    // the box of F2 and once x + K clears the box of F1.
    let call = si_integrate(lo2, hi1 - strike, |xs| cdf.second_minus_joint(xs, |x| x + strike));
    // Put: int_0^K G1 + int_K^inf [G1(z) - G(z, z - K)] dz.
    let head = if strike > lo1 {
        let top = strike.min(hi1);
        let r = si_integrate(lo1, top, |ps| cdf.first(ps));
        SiIntegral {
            value: r.value + (strike - top).max(0.0),
            ..r
        }
    } else {
        si_integrate(0.0, 0.0, |_| Vec::new())
    };
    let body = si_integrate(strike.max(lo1), hi2 + strike, |zs| cdf.first_minus_joint(zs, |z| z - strike));
    // Ends where the range was cut short of the true support; the lower end
    // of the put body at z = K is a genuine boundary.
    let mut tail = call.ends.0.abs().max(call.ends.1.abs()).max(body.ends.1.abs()).max(head.ends.0.abs());
    if strike < lo1 {
        tail = tail.max(body.ends.0.abs());
    }
    if tail > SI_TAIL_BUDGET {
        return Err(Error::numerical(format!(
            "single-integral integrand is {tail:.2e} at the edge of the distribution box"
        )));
    }
    let refine = call.refine.max(body.refine + head.refine);
    Ok((call.value.max(0.0), (head.value + body.value).max(0.0), refine, tail))
}

/// Calendar spread by single integrals of the price-level joint and
/// marginal distribution functions. Puts come from their own integral, not
/// from parity.
pub fn price_cso_single_integral(
    model: &ModelParams,
    curve: &FuturesCurve,
    cso: &CsoContract,
    cfg: &NumericsConfig,
) -> Result<PriceResult> {
    Ok(price_cso_single_integral_ladder(model, curve, cso, &[cso.strike], cfg)?.remove(0))
}

pub fn price_cso_single_integral_ladder(
    model: &ModelParams,
    curve: &FuturesCurve,
    cso: &CsoContract,
    strikes: &[f64],
    cfg: &NumericsConfig,
) -> Result<Vec<PriceResult>> {
    cso.validate()?;
    if strikes.iter().any(|k| !k.is_finite()) {
        return Err(Error::invalid("strikes must be finite"));
    }
    let (f1, f2) = (curve.price(cso.t1), curve.price(cso.t2));
    let fwd = if strikes.iter().any(|k| *k >= 0.0) {
        Some(PriceLevelCdf::new(&cso_context(model, cso.expiry, cso.t1, cso.t2, cfg)?, f1, f2, cfg)?)
    } else {
        None
    };
    let rev = if strikes.iter().any(|k| *k < 0.0) {
        Some(PriceLevelCdf::new(&cso_context(model, cso.expiry, cso.t2, cso.t1, cfg)?, f2, f1, cfg)?)
    } else {
        None
    };
    let d = cso.discount();
    strikes
        .iter()
        .map(|&k| {
            // With K < 0 the original call is the reverse put at -K and vice versa.
            let (call, put, refine, tail) = if k >= 0.0 {
                single_integral_pair(fwd.as_ref().unwrap(), k)?
            } else {
                let (c, p, r, t) = single_integral_pair(rev.as_ref().unwrap(), -k)?;
                (p, c, r, t)
            };
            let kind = cso.kind;
            let price = d * match kind {
                OptionKind::Call => call,
                OptionKind::Put => put,
            };
            Ok(PriceResult::new(price, Method::SingleIntegral)
                .with("call", d * call)
                .with("put", d * put)
                .with("refinement_change", d * refine)
                .with("tail_integrand", tail)
                .with("reverse_spread", if k < 0.0 { 1.0 } else { 0.0 }))
        })
        .collect()
}

/// One calendar spread by the chosen engine.
pub fn price_cso(
    model: &ModelParams,
    curve: &FuturesCurve,
    cso: &CsoContract,
    method: CsoMethod,
    cfg: &NumericsConfig,
) -> Result<PriceResult> {
    Ok(price_cso_ladder(model, curve, cso, &[cso.strike], method, cfg)?.remove(0))
}

/// Prices `cso` at every strike. Work shared between strikes (lattices,
/// joint distributions) is built once; the per-strike work runs in
/// parallel and results come back in input order.
pub fn price_cso_ladder(
    model: &ModelParams,
    curve: &FuturesCurve,
    cso: &CsoContract,
    strikes: &[f64],
    method: CsoMethod,
    cfg: &NumericsConfig,
) -> Result<Vec<PriceResult>> {
    match method {
        CsoMethod::CaldanaFusai => strikes
            .par_iter()
            .map(|&k| price_cso_caldana_fusai(model, curve, &cso.with_strike(k), cfg.carr_madan_delta, cfg))
            .collect(),
        CsoMethod::HurdZhou => {
            // The payoff transform has no K = 0 member; the lower bound is
            // exact there, so those rows come from it.
            let nonzero: Vec<f64> = strikes.iter().copied().filter(|k| *k != 0.0).collect();
            let mut hz = price_cso_hurd_zhou_ladder(model, curve, cso, &nonzero, cfg)?.into_iter();
            strikes
                .iter()
                .map(|&k| {
                    if k == 0.0 {
                        price_cso_caldana_fusai(model, curve, &cso.with_strike(0.0), cfg.carr_madan_delta, cfg)
                    } else {
                        Ok(hz.next().expect("one price per non-zero strike"))
                    }
                })
                .collect()
        }
        CsoMethod::SingleIntegral => price_cso_single_integral_ladder(model, curve, cso, strikes, cfg),
    }
}

/// Writes `method,T,T1,T2,K,price,stderr` rows.
pub fn write_results_csv(w: impl Write, rows: &[(CsoContract, PriceResult)]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["method", "T", "T1", "T2", "K", "price", "stderr"])?;
    for (c, r) in rows {
        wtr.write_record([
            r.method.tag().to_string(),
            c.expiry.to_string(),
            c.t1.to_string(),
            c.t2.to_string(),
            c.strike.to_string(),
            format!("{:.10}", r.price),
            r.stderr.map(|s| format!("{s:.10}")).unwrap_or_default(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn black76_reference_value() {
        let c = black76(100.0, 100.0, 1.0, 0.2, 0.0, OptionKind::Call);
        assert!((c - 7.965_567_455_4).abs() < 1e-9, "{c}");
    }

    #[test]
    fn payoff_transform_is_hermitian() {
        let (z1, z2) = (Complex64::new(1.3, -3.0), Complex64::new(-0.7, 1.5));
        let a = spread_payoff_transform(z1, z2).unwrap();
        let b = spread_payoff_transform(-z1.conj(), -z2.conj()).unwrap();
        assert!((a - b.conj()).norm() < 1e-12 * a.norm());
    }
}
