//! Joint characteristic function of two futures log-returns.
//!
//! Each stochastic factor contributes `exp(prefactor + A(0,T) v0 + B(0,T))`
//! where `(A, B)` solve a Riccati system. Two interchangeable backends solve
//! it: an adaptive Dormand-Prince integrator and a closed form in Kummer
//! functions. Deterministic (Clewlow-Strickland) factors multiply in
//! analytically.

use std::sync::atomic::{AtomicUsize, Ordering};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DeterministicFactor, FactorParams, FuturesCurve, ModelParams};
use crate::specfun::{kummer_m, tricomi_u_with_derivative};

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };
const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Local error tolerance of the Riccati integrator.
pub const ODE_TOLERANCE: f64 = 1e-10;
const ODE_MIN_STEP: f64 = 1e-14;
const ODE_MAX_STEPS: usize = 100_000;
/// Below this damping rate the closed form is not used.
pub const LAMBDA_CLOSED_FORM_MIN: f64 = 1e-6;
/// Largest tolerated `(|Dn M| + |N U|) / |Dn M + N U|` in the closed form.
const MAX_COMBINATION_CANCELLATION: f64 = 1e6;
const MAX_UNWRAP_DEPTH: u32 = 14;

/// `(e^{x} - 1) / x`, stable near zero.
fn expm1_ratio(x: f64) -> f64 {
    if x.abs() < 1e-300 {
        1.0
    } else {
        x.exp_m1() / x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    ClosedForm,
    Ode,
}

/// Per-factor quantities that depend on `u` but not on `t`.
#[derive(Debug, Clone, Copy)]
struct FactorTerms {
    kappa: f64,
    theta: f64,
    sigma: f64,
    rho: f64,
    lambda: f64,
    /// `sum u_k exp(-lambda T_k)`, so that `f1(t) = c1 exp(lambda t)`.
    c1: Complex64,
    /// `sum u_k exp(-2 lambda T_k)`, so that `f2(t) = c2 exp(2 lambda t)`.
    c2: Complex64,
}

impl FactorTerms {
    fn new(f: &FactorParams, u1: Complex64, u2: Complex64, t1: f64, t2: f64) -> Self {
        let l = f.lambda;
        Self {
            kappa: f.kappa,
            theta: f.theta,
            sigma: f.sigma,
            rho: f.rho,
            lambda: l,
            c1: u1 * (-l * t1).exp() + u2 * (-l * t2).exp(),
            c2: u1 * (-2.0 * l * t1).exp() + u2 * (-2.0 * l * t2).exp(),
        }
    }

    /// `rho / sigma`, taken as zero for uncorrelated factors so that `sigma = 0` is allowed.
    fn rho_over_sigma(&self) -> f64 {
        if self.rho == 0.0 {
            0.0
        } else {
            self.rho / self.sigma
        }
    }

    fn q(&self, t: f64) -> Complex64 {
        let e1 = (self.lambda * t).exp();
        let f1 = self.c1 * e1;
        let f2 = self.c2 * e1 * e1;
        I * self.rho_over_sigma() * (self.kappa - self.lambda) * f1
            - 0.5 * (1.0 - self.rho * self.rho) * f1 * f1
            - 0.5 * I * f2
    }

    /// `q` identically zero with a zero terminal value, so that `A = B = 0`.
    /// Happens for uncorrelated factors at the martingale points.
    fn is_trivial(&self) -> bool {
        let w = self.c1 * self.c1 + I * self.c2;
        self.rho == 0.0 && w.norm() <= 1e-15 * (self.c1.norm_sqr() + self.c2.norm())
    }

    fn a_terminal(&self, t: f64) -> Complex64 {
        I * self.rho_over_sigma() * self.c1 * (self.lambda * t).exp()
    }

    /// Exponent of the factor in front of `exp(A v0 + B)`.
    fn prefactor(&self, t: f64, v0: f64) -> Complex64 {
        let integral = -self.c1 * t * expm1_ratio(self.lambda * t);
        I * self.rho_over_sigma() * (self.kappa * self.theta * integral - self.c1 * v0)
    }
}

const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Integrates the Riccati pair backwards from `T` to `t` in `tau = T - s`:
/// `dA/dtau = -kappa A + sigma^2 A^2 / 2 + q(T - tau)`, `dB/dtau = kappa theta A`.
fn riccati_ode(ft: &FactorTerms, t: f64, big_t: f64) -> Result<(Complex64, Complex64)> {
    let rhs = |tau: f64, y: [Complex64; 2]| -> [Complex64; 2] {
        let a = y[0];
        [
            -ft.kappa * a + 0.5 * ft.sigma * ft.sigma * a * a + ft.q(big_t - tau),
            ft.kappa * ft.theta * a,
        ]
    };
    let span = big_t - t;
    let mut y = [ft.a_terminal(big_t), ZERO];
    if span <= 0.0 {
        return Ok((y[0], y[1]));
    }
    let mut tau = 0.0;
    let mut h = (span / 64.0).min(0.05);
    let mut k = [[ZERO; 2]; 7];
    k[0] = rhs(tau, y);
    for _ in 0..ODE_MAX_STEPS {
        if tau >= span {
            return Ok((y[0], y[1]));
        }
        h = h.min(span - tau);
        let mut y_new = y;
        for s in 1..7 {
            let mut ys = y;
            for (j, kj) in k.iter().enumerate().take(s) {
                let w = DP_A[s][j];
                if w != 0.0 {
                    ys[0] += h * w * kj[0];
                    ys[1] += h * w * kj[1];
                }
            }
            k[s] = rhs(tau + DP_C[s] * h, ys);
            y_new = ys;
        }
        let mut err = 0.0_f64;
        for c in 0..2 {
            let mut e = ZERO;
            for s in 0..7 {
                e += h * DP_E[s] * k[s][c];
            }
            let scale = ODE_TOLERANCE * (1.0 + y[c].norm().max(y_new[c].norm()));
            err = err.max(e.norm() / scale);
        }
        if !err.is_finite() || !y_new[0].re.is_finite() || !y_new[0].im.is_finite() {
            h *= 0.2;
        } else if err <= 1.0 {
            tau += h;
            y = y_new;
            k[0] = k[6];
            let grow = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).min(5.0) };
            h *= grow;
        } else {
            h *= (0.9 * err.powf(-0.2)).max(0.2);
        }
        if h < ODE_MIN_STEP * span.max(1.0) {
            return Err(Error::NonConvergence {
                method: "riccati ode",
                detail: format!("step size underflow at tau = {tau:.6} of {span:.6}"),
            });
        }
    }
    Err(Error::NonConvergence {
        method: "riccati ode",
        detail: format!("more than {ODE_MAX_STEPS} steps"),
    })
}

fn check_times(t: f64, big_t: f64, t1: f64, t2: f64) -> Result<()> {
    if !(0.0..=big_t).contains(&t) || big_t <= 0.0 || big_t > t1.min(t2) {
        return Err(Error::invalid(format!(
            "need 0 <= t <= T <= min(T1, T2), got t = {t}, T = {big_t}, T1 = {t1}, T2 = {t2}"
        )));
    }
    Ok(())
}

/// `(A(0,T), B(0,T))` for one factor by adaptive Dormand-Prince integration.
pub fn solve_riccati(
    factor: &FactorParams,
    u1: Complex64,
    u2: Complex64,
    big_t: f64,
    t1: f64,
    t2: f64,
) -> Result<(Complex64, Complex64)> {
    solve_riccati_at(factor, u1, u2, 0.0, big_t, t1, t2)
}

/// `(A(t,T), B(t,T))` for one factor by adaptive Dormand-Prince integration.
pub fn solve_riccati_at(
    factor: &FactorParams,
    u1: Complex64,
    u2: Complex64,
    t: f64,
    big_t: f64,
    t1: f64,
    t2: f64,
) -> Result<(Complex64, Complex64)> {
    check_times(t, big_t, t1, t2)?;
    riccati_ode(&FactorTerms::new(factor, u1, u2, t1, t2), t, big_t)
}

/// Kummer representation of one factor's Riccati solution:
/// `A(t) = (2 lambda / sigma^2) [kappa/lambda - x/2 + x W'(x) / W(x)]` with
/// `W = Dn M(a,b,x) + N U(a,b,x)` and `x = x_T exp(-lambda (T - t))`.
struct KummerSolution {
    ft: FactorTerms,
    a: Complex64,
    b: Complex64,
    /// `x(t) / exp(lambda t)`.
    x_scale: Complex64,
    dn: Complex64,
    n: Complex64,
    terminal: Node,
}

impl KummerSolution {
    /// `None` when the representation degenerates (`z` or `x` vanishing).
    fn new(ft: FactorTerms, big_t: f64) -> Result<Option<Self>> {
        let FactorTerms {
            kappa,
            sigma,
            rho,
            lambda,
            c1,
            c2,
            ..
        } = ft;
        if lambda < LAMBDA_CLOSED_FORM_MIN || sigma <= 0.0 {
            return Ok(None);
        }
        let cc1 = rho * (kappa - lambda) / sigma * c1;
        let cc2 = -0.5 * (1.0 - rho * rho) * c1 * c1;
        let cc3 = -0.5 * c2;
        let mut z = (cc2 + I * cc3).sqrt();
        // Both roots span the same solutions. With Re x >= 0, U is the
        // recessive one and the combination below does not cancel.
        if z.im > 0.0 {
            z = -z;
        }
        let s2 = sigma * std::f64::consts::SQRT_2;
        let x_scale = s2 / lambda * I * z;
        let x_t = x_scale * (lambda * big_t).exp();
        if z.norm() < 1e-8 || x_t.norm() < 1e-8 {
            return Ok(None);
        }
        let a = (kappa * z - 0.5 * s2 * cc1) / (2.0 * z * lambda) + 0.5;
        let b = Complex64::new(1.0 + kappa / lambda, 0.0);
        let (m, mp, u, up) = kummer_quad(a, b, x_t)?;
        let d = sigma * sigma * ft.a_terminal(big_t) / (2.0 * lambda) + 0.5 * x_t - kappa / lambda;
        let n = d * m - x_t * mp;
        let dn = x_t * up - d * u;
        let terminal = Node {
            t: big_t,
            x: x_t,
            w: combine(dn * m, n * u)?,
            wp: dn * mp + n * up,
        };
        Ok(Some(Self {
            ft,
            a,
            b,
            x_scale,
            dn,
            n,
            terminal,
        }))
    }

    fn x(&self, t: f64) -> Complex64 {
        self.x_scale * (self.ft.lambda * t).exp()
    }

    /// `(W, dW/dx)` at time `t`.
    fn node(&self, t: f64) -> Result<Node> {
        let x = self.x(t);
        let (m, mp, u, up) = kummer_quad(self.a, self.b, x)?;
        Ok(Node {
            t,
            x,
            w: combine(self.dn * m, self.n * u)?,
            wp: self.dn * mp + self.n * up,
        })
    }

    fn a_of(&self, node: &Node) -> Complex64 {
        let FactorTerms {
            kappa,
            sigma,
            lambda,
            ..
        } = self.ft;
        2.0 * lambda / (sigma * sigma) * (kappa / lambda - 0.5 * node.x + node.x * node.wp / node.w)
    }

    /// `d ln W / dt`.
    fn log_derivative(&self, node: &Node) -> Complex64 {
        self.ft.lambda * node.x * node.wp / node.w
    }

    /// Continuous change of `arg W` between two nodes: the principal value
    /// plus the multiple of `2 pi` closest to a trapezoid estimate of the
    /// integrated log-derivative, bisecting while that estimate is unreliable.
    fn arg_change(&self, na: &Node, nb: &Node, depth: u32) -> Result<f64> {
        let d = (nb.w / na.w).arg();
        let ga = self.log_derivative(na);
        let gb = self.log_derivative(nb);
        let h = nb.t - na.t;
        if (ga - gb).norm() * h < 0.5 {
            let estimate = 0.5 * (ga.im + gb.im) * h;
            let k = ((estimate - d) / (2.0 * std::f64::consts::PI)).round();
            return Ok(d + 2.0 * std::f64::consts::PI * k);
        }
        if depth >= MAX_UNWRAP_DEPTH {
            return Err(Error::numerical("argument of the Kummer combination varies too fast to unwrap"));
        }
        let nm = self.node(0.5 * (na.t + nb.t))?;
        Ok(self.arg_change(na, &nm, depth + 1)? + self.arg_change(&nm, nb, depth + 1)?)
    }

    fn a_at(&self, t: f64) -> Result<Complex64> {
        Ok(self.a_of(&self.node(t)?))
    }

    fn ab(&self) -> Result<(Complex64, Complex64)> {
        let n0 = self.node(0.0)?;
        let nt = &self.terminal;
        let FactorTerms {
            kappa,
            theta,
            sigma,
            ..
        } = self.ft;
        let log_w = Complex64::new((nt.w / n0.w).norm().ln(), self.arg_change(&n0, nt, 0)?);
        let b0 = 2.0 * kappa * theta / (sigma * sigma) * (-0.5 * (nt.x - n0.x) + kappa * nt.t + log_w);
        Ok((self.a_of(&n0), b0))
    }
}

struct Node {
    t: f64,
    x: Complex64,
    w: Complex64,
    wp: Complex64,
}

/// `p + q`, rejected when the two terms cancel heavily.
fn combine(p: Complex64, q: Complex64) -> Result<Complex64> {
    let w = p + q;
    if (p.norm() + q.norm()) > MAX_COMBINATION_CANCELLATION * w.norm() {
        return Err(Error::numerical("cancellation in the Kummer combination"));
    }
    Ok(w)
}

/// `M, M', U, U'` at `(a, b, x)`.
fn kummer_quad(
    a: Complex64,
    b: Complex64,
    x: Complex64,
) -> Result<(Complex64, Complex64, Complex64, Complex64)> {
    let m = kummer_m(a, b, x)?.value;
    let mp = a / b * kummer_m(a + 1.0, b + 1.0, x)?.value;
    let (u, up) = tricomi_u_with_derivative(a, b, x)?;
    let u = u.value;
    Ok((m, mp, u, up))
}

/// `A(t,T)` for one factor from the Kummer-function closed form.
///
/// `u = (0, 0)` returns zero without touching the special functions. Fails
/// when the representation degenerates (`lambda` or `sigma` near zero) or a
/// special-function evaluation loses too much precision.
pub fn closed_form_a(
    factor: &FactorParams,
    u1: Complex64,
    u2: Complex64,
    t: f64,
    big_t: f64,
    t1: f64,
    t2: f64,
) -> Result<Complex64> {
    check_times(t, big_t, t1, t2)?;
    if u1 == ZERO && u2 == ZERO {
        return Ok(ZERO);
    }
    let ft = FactorTerms::new(factor, u1, u2, t1, t2);
    if ft.is_trivial() {
        return Ok(ZERO);
    }
    match KummerSolution::new(ft, big_t)? {
        Some(sol) => sol.a_at(t),
        None => Err(Error::numerical("closed form degenerates for these parameters")),
    }
}

/// `(A(0,T), B(0,T))` for one factor from the closed form, `B` by integrating
/// `A` exactly through the logarithm of the Kummer combination.
pub fn closed_form_ab(
    factor: &FactorParams,
    u1: Complex64,
    u2: Complex64,
    big_t: f64,
    t1: f64,
    t2: f64,
) -> Result<(Complex64, Complex64)> {
    check_times(0.0, big_t, t1, t2)?;
    if u1 == ZERO && u2 == ZERO {
        return Ok((ZERO, ZERO));
    }
    let ft = FactorTerms::new(factor, u1, u2, t1, t2);
    if ft.is_trivial() {
        return Ok((ZERO, ZERO));
    }
    match KummerSolution::new(ft, big_t)? {
        Some(sol) => sol.ab(),
        None => Err(Error::numerical("closed form degenerates for these parameters")),
    }
}

/// Joint characteristic function of deterministic (log-normal) factors.
pub fn phi_cs(
    factors: &[DeterministicFactor],
    u1: Complex64,
    u2: Complex64,
    big_t: f64,
    t1: f64,
    t2: f64,
) -> Complex64 {
    ln_phi_cs(factors, u1, u2, big_t, t1, t2).exp()
}

fn ln_phi_cs(
    factors: &[DeterministicFactor],
    u1: Complex64,
    u2: Complex64,
    big_t: f64,
    t1: f64,
    t2: f64,
) -> Complex64 {
    factors
        .iter()
        .map(|f| {
            let l = f.lambda;
            // sigma^2 (e^{2 l T} - 1) / (4 l), finite as l -> 0
            let w = f.sigma_hat * f.sigma_hat * big_t * expm1_ratio(2.0 * l * big_t) / 2.0;
            let lin = u1 * (-2.0 * l * t1).exp() + u2 * (-2.0 * l * t2).exp();
            let sq = u1 * (-l * t1).exp() + u2 * (-l * t2).exp();
            -w * (I * lin + sq * sq)
        })
        .sum()
}

/// Evaluator of the joint characteristic function for fixed `(T, T1, T2)`.
#[derive(Debug)]
pub struct CFContext {
    model: ModelParams,
    t: f64,
    t1: f64,
    t2: f64,
    backend: Backend,
    fallback: bool,
    fallbacks: AtomicUsize,
}

impl Clone for CFContext {
    fn clone(&self) -> Self {
        Self {
            model: self.model.clone(),
            t: self.t,
            t1: self.t1,
            t2: self.t2,
            backend: self.backend,
            fallback: self.fallback,
            fallbacks: AtomicUsize::new(self.fallbacks.load(Ordering::Relaxed)),
        }
    }
}

impl CFContext {
    /// Closed-form backend with automatic fallback to the integrator.
    pub fn new(model: ModelParams, t: f64, t1: f64, t2: f64) -> Result<Self> {
        model.ensure_valid()?;
        check_times(0.0, t, t1, t2)?;
        Ok(Self {
            model,
            t,
            t1,
            t2,
            backend: Backend::ClosedForm,
            fallback: true,
            fallbacks: AtomicUsize::new(0),
        })
    }

    pub fn with_backend(mut self, backend: Backend) -> Self {
        self.backend = backend;
        self
    }

    /// When off, closed-form failures surface as errors instead of being
    /// re-solved by the integrator.
    pub fn with_fallback(mut self, fallback: bool) -> Self {
        self.fallback = fallback;
        self
    }

    pub fn model(&self) -> &ModelParams {
        &self.model
    }

    pub fn maturities(&self) -> (f64, f64, f64) {
        (self.t, self.t1, self.t2)
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    /// Number of factor evaluations that fell back from the closed form.
    pub fn fallback_count(&self) -> usize {
        self.fallbacks.load(Ordering::Relaxed)
    }

    fn factor_ab(&self, f: &FactorParams, u1: Complex64, u2: Complex64) -> Result<(Complex64, Complex64)> {
        let (t, t1, t2) = (self.t, self.t1, self.t2);
        if u1 == ZERO && u2 == ZERO {
            return Ok((ZERO, ZERO));
        }
        match self.backend {
            Backend::Ode => solve_riccati(f, u1, u2, t, t1, t2),
            Backend::ClosedForm => {
                let ft = FactorTerms::new(f, u1, u2, t1, t2);
                if ft.is_trivial() {
                    return Ok((ZERO, ZERO));
                }
                let closed = KummerSolution::new(ft, t).and_then(|s| match s {
                    Some(sol) => sol.ab(),
                    None => Err(Error::numerical("closed form degenerates for these parameters")),
                });
                match closed {
                    Ok(ab) if ab.0.is_finite() && ab.1.is_finite() => Ok(ab),
                    Ok(_) | Err(_) if self.fallback => {
                        self.fallbacks.fetch_add(1, Ordering::Relaxed);
                        riccati_ode(&ft, 0.0, t)
                    }
                    Ok(_) => Err(Error::numerical("closed form returned a non-finite value")),
                    Err(e) => Err(e),
                }
            }
        }
    }

    /// `ln phi(u1, u2)`, accumulated per factor in log space.
    pub fn ln_phi(&self, u1: Complex64, u2: Complex64) -> Result<Complex64> {
        if u1 == ZERO && u2 == ZERO {
            return Ok(ZERO);
        }
        let mut acc = ln_phi_cs(&self.model.deterministic_factors, u1, u2, self.t, self.t1, self.t2);
        for (j, f) in self.model.factors.iter().enumerate() {
            let (a, b) = self.factor_ab(f, u1, u2).map_err(|e| Error::Factor {
                factor: j,
                source: Box::new(e),
            })?;
            let ft = FactorTerms::new(f, u1, u2, self.t1, self.t2);
            acc += ft.prefactor(self.t, f.v0) + a * f.v0 + b;
        }
        Ok(acc)
    }

    /// `phi(u1, u2) = E[exp(i (u1 X1 + u2 X2))]` for the log-returns `X_k`.
    pub fn phi(&self, u1: Complex64, u2: Complex64) -> Result<Complex64> {
        if u1 == ZERO && u2 == ZERO {
            return Ok(Complex64::new(1.0, 0.0));
        }
        Ok(self.ln_phi(u1, u2)?.exp())
    }

    /// Characteristic function of the log-prices, `exp(i sum u_k ln F(0,T_k)) phi(u)`.
    pub fn phi_price_level(&self, curve: &FuturesCurve, u1: Complex64, u2: Complex64) -> Result<Complex64> {
        Ok(self.phi(u1, u2)? * log_price_shift(curve.price(self.t1), curve.price(self.t2), u1, u2))
    }

    /// Largest `s <= limit` such that `phi` stays finite along `u = -i s d`
    /// for direction `d = (d1, d2)`; found by bisection on integrator blow-up.
    pub fn strip_bound(&self, d1: f64, d2: f64, limit: f64) -> f64 {
        let ode = self.clone().with_backend(Backend::Ode);
        let ok = |s: f64| {
            let u1 = Complex64::new(0.0, -s * d1);
            let u2 = Complex64::new(0.0, -s * d2);
            matches!(ode.ln_phi(u1, u2), Ok(v) if v.is_finite() && v.re < 700.0)
        };
        if ok(limit) {
            return limit;
        }
        let (mut lo, mut hi) = (0.0, limit);
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if ok(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }
}

/// `exp(i (u1 ln F1 + u2 ln F2))`.
pub fn log_price_shift(f1: f64, f2: f64, u1: Complex64, u2: Complex64) -> Complex64 {
    (I * (u1 * f1.ln() + u2 * f2.ln())).exp()
}
