//! Complex Gamma (Lanczos) and Kummer's confluent hypergeometric functions
//! `M(a, b, z)` and `U(a, b, z)`.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Maximum number of series terms for `M`.
pub const MAX_TERMS: usize = 10_000;
/// Stop once this many consecutive terms are below `SERIES_EPS * |sum|`.
const QUIET_TERMS: usize = 3;
const SERIES_EPS: f64 = 1e-15;
/// Largest tolerated ratio between the biggest series term and the result.
/// Beyond it more than seven significant digits are lost to cancellation.
pub const MAX_CANCELLATION: f64 = 1e7;
/// Cancellation limit for `U` built from two `M` values. Near-integer `b`
/// alone costs about `1 / INTEGER_B_SHIFT`.
pub const MAX_U_CANCELLATION: f64 = 1e9;
/// Perturbation used for `U` at integer `b`.
pub const INTEGER_B_SHIFT: f64 = 1e-7;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// `sin(pi z)` with the real part reduced first, so that values near the
/// zeros at the integers keep full relative accuracy.
pub fn sin_pi(z: Complex64) -> Complex64 {
    let n = z.re.round();
    let r = c(z.re - n, z.im) * PI;
    let s = r.sin();
    if (n as i64) % 2 == 0 {
        s
    } else {
        -s
    }
}

fn is_nonpositive_integer(z: Complex64) -> bool {
    z.im == 0.0 && z.re <= 0.0 && z.re == z.re.round()
}

fn lanczos_sum(zm1: Complex64) -> Complex64 {
    let mut x = c(LANCZOS_COEF[0], 0.0);
    for (i, &p) in LANCZOS_COEF.iter().enumerate().skip(1) {
        x += p / (zm1 + i as f64);
    }
    x
}

/// `Gamma(z)` for complex `z`, using the reflection formula left of `Re z = 1/2`.
pub fn gamma_complex(z: Complex64) -> Result<Complex64> {
    if is_nonpositive_integer(z) {
        return Err(Error::Pole {
            function: "gamma",
            at: format!("{z}"),
        });
    }
    if z.re < 0.5 {
        let g = gamma_complex(c(1.0, 0.0) - z)?;
        return Ok(PI / (sin_pi(z) * g));
    }
    let zm1 = z - 1.0;
    let t = zm1 + LANCZOS_G + 0.5;
    let x = lanczos_sum(zm1);
    Ok((2.0 * PI).sqrt() * t.powc(zm1 + 0.5) * (-t).exp() * x)
}

/// `ln Gamma(z)` (not necessarily the principal branch continuation; only
/// its exponential is meaningful left of `Re z = 1/2`).
pub fn ln_gamma_complex(z: Complex64) -> Result<Complex64> {
    if is_nonpositive_integer(z) {
        return Err(Error::Pole {
            function: "ln_gamma",
            at: format!("{z}"),
        });
    }
    if z.re < 0.5 {
        let lg = ln_gamma_complex(c(1.0, 0.0) - z)?;
        return Ok(c(PI.ln(), 0.0) - sin_pi(z).ln() - lg);
    }
    let zm1 = z - 1.0;
    let t = zm1 + LANCZOS_G + 0.5;
    let x = lanczos_sum(zm1);
    Ok(0.5 * (2.0 * PI).ln() + (zm1 + 0.5) * t.ln() - t + x.ln())
}

/// How a Kummer value was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KummerMethod {
    /// Direct power series.
    Series,
    /// Power series after Kummer's transformation `M(a,b,z) = e^z M(b-a,b,-z)`.
    TransformedSeries,
    /// `U` from two `M` values (sine reflection).
    UReflection,
    /// `U` at (near) integer `b`, interpolated between `b -/+ INTEGER_B_SHIFT`.
    UPerturbed,
    /// Large-argument asymptotic series of `U`.
    UAsymptotic,
    /// Quadrature of the Laplace-integral representation of `U`.
    UIntegral,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KummerResult {
    pub value: Complex64,
    pub method: KummerMethod,
    pub terms_used: usize,
    pub converged: bool,
    /// Ratio of the largest intermediate magnitude to the result.
    pub cancellation: f64,
}

/// Raw power series with term-ratio stopping; no convergence judgement.
fn m_series(a: Complex64, b: Complex64, z: Complex64) -> (Complex64, usize, bool, f64) {
    let mut term = c(1.0, 0.0);
    let mut sum = c(1.0, 0.0);
    let mut biggest = 1.0_f64;
    let mut quiet = 0;
    for n in 0..MAX_TERMS {
        let nf = n as f64;
        term = term * (a + nf) * z / ((b + nf) * (nf + 1.0));
        sum += term;
        let t = term.norm();
        if t > biggest {
            biggest = t;
        }
        if !sum.re.is_finite() || !sum.im.is_finite() {
            return (sum, n + 1, false, f64::INFINITY);
        }
        if t <= SERIES_EPS * sum.norm() {
            quiet += 1;
            if quiet >= QUIET_TERMS {
                return (sum, n + 1, true, biggest / sum.norm());
            }
        } else {
            quiet = 0;
        }
    }
    (sum, MAX_TERMS, false, biggest / sum.norm())
}

/// Kummer's function `M(a, b, z) = 1F1(a; b; z)`.
///
/// Uses the power series directly for `Re z >= 0` and after Kummer's
/// transformation otherwise. Raises an error rather than returning a value
/// dominated by rounding when the series cancels too heavily.
pub fn kummer_m(a: Complex64, b: Complex64, z: Complex64) -> Result<KummerResult> {
    if is_nonpositive_integer(b) {
        return Err(Error::Pole {
            function: "kummer_m",
            at: format!("b = {b}"),
        });
    }
    if z == c(0.0, 0.0) {
        return Ok(KummerResult {
            value: c(1.0, 0.0),
            method: KummerMethod::Series,
            terms_used: 0,
            converged: true,
            cancellation: 1.0,
        });
    }
    let (value, terms, converged, cancellation, method) = if z.re >= 0.0 {
        let (s, n, ok, canc) = m_series(a, b, z);
        (s, n, ok, canc, KummerMethod::Series)
    } else {
        let (s, n, ok, canc) = m_series(b - a, b, -z);
        (z.exp() * s, n, ok, canc, KummerMethod::TransformedSeries)
    };
    if !converged || !value.re.is_finite() || !value.im.is_finite() {
        return Err(Error::NonConvergence {
            method: "kummer_m series",
            detail: format!("a = {a}, b = {b}, z = {z} after {terms} terms"),
        });
    }
    if cancellation > MAX_CANCELLATION {
        return Err(Error::NonConvergence {
            method: "kummer_m series",
            detail: format!("cancellation {cancellation:.3e} at a = {a}, b = {b}, z = {z}"),
        });
    }
    Ok(KummerResult {
        value,
        method,
        terms_used: terms,
        converged,
        cancellation,
    })
}

fn is_integer(b: Complex64) -> bool {
    b.im == 0.0 && b.re == b.re.round()
}

/// Tricomi's function `U(a, b, z)` from two `M` values via
/// `pi / sin(pi b) [M(a,b,z)/(G(1+a-b)G(b)) - z^(1-b) M(1+a-b,2-b,z)/(G(a)G(2-b))]`
/// with the principal branch of `z^(1-b)`.
///
/// Integer `b` is a removable singularity of this representation and is
/// rejected; see [`kummer_u_regularized`].
pub fn kummer_u(a: Complex64, b: Complex64, z: Complex64) -> Result<KummerResult> {
    if is_integer(b) {
        return Err(Error::Pole {
            function: "kummer_u",
            at: format!("integer b = {b}"),
        });
    }
    if z == c(0.0, 0.0) {
        return Err(Error::invalid("kummer_u needs z != 0"));
    }
    let one = c(1.0, 0.0);
    let m1 = kummer_m(a, b, z)?;
    let m2 = kummer_m(one + a - b, c(2.0, 0.0) - b, z)?;
    // 1/Gamma is entire; a pole of Gamma contributes zero.
    let rgamma = |x: Complex64| -> Result<Complex64> {
        if is_nonpositive_integer(x) {
            Ok(c(0.0, 0.0))
        } else {
            Ok(one / gamma_complex(x)?)
        }
    };
    let t1 = m1.value * rgamma(one + a - b)? * rgamma(b)?;
    let t2 = z.powc(one - b) * m2.value * rgamma(a)? * rgamma(c(2.0, 0.0) - b)?;
    let value = PI / sin_pi(b) * (t1 - t2);
    if !value.re.is_finite() || !value.im.is_finite() {
        return Err(Error::NonConvergence {
            method: "kummer_u",
            detail: format!("non-finite value at a = {a}, b = {b}, z = {z}"),
        });
    }
    let scale = t1.norm().max(t2.norm());
    let cancellation = (scale / (t1 - t2).norm()).max(m1.cancellation).max(m2.cancellation);
    if cancellation > MAX_U_CANCELLATION {
        return Err(Error::NonConvergence {
            method: "kummer_u",
            detail: format!("cancellation {cancellation:.3e} at a = {a}, b = {b}, z = {z}"),
        });
    }
    Ok(KummerResult {
        value,
        method: KummerMethod::UReflection,
        terms_used: m1.terms_used + m2.terms_used,
        converged: true,
        cancellation,
    })
}

/// `U(a, b, z)` for any `b`. Within `INTEGER_B_SHIFT` of an integer the value
/// is interpolated linearly between the two shifted evaluations, which at the
/// integer itself is their average.
pub fn kummer_u_regularized(a: Complex64, b: Complex64, z: Complex64) -> Result<KummerResult> {
    let n = b.re.round();
    let dist = b.re - n;
    if b.im != 0.0 || dist.abs() >= INTEGER_B_SHIFT {
        return kummer_u(a, b, z);
    }
    let h = INTEGER_B_SHIFT;
    let lo = kummer_u(a, c(n - h, 0.0), z)?;
    let hi = kummer_u(a, c(n + h, 0.0), z)?;
    let w = (dist + h) / (2.0 * h);
    Ok(KummerResult {
        value: lo.value * (1.0 - w) + hi.value * w,
        method: KummerMethod::UPerturbed,
        terms_used: lo.terms_used + hi.terms_used,
        converged: true,
        cancellation: lo.cancellation.max(hi.cancellation),
    })
}

/// Asymptotic series `U(a,b,z) ~ z^-a sum (a)_n (1+a-b)_n / n! (-z)^-n`,
/// summed up to its smallest term, together with `dU/dz`. `None` if that
/// term is not below `SERIES_EPS` relative to the sum.
fn u_asymptotic_pair(a: Complex64, b: Complex64, z: Complex64) -> Option<(KummerResult, Complex64)> {
    if z.norm() == 0.0 || (z.re < 0.0 && z.im.abs() < 1e-12 * z.norm()) {
        return None;
    }
    let a1b = c(1.0, 0.0) + a - b;
    let mut term = c(1.0, 0.0);
    let mut sum = term;
    // sum of (a + n) term_n, for the derivative
    let mut dsum = a;
    let mut prev = 1.0_f64;
    let mut biggest = 1.0_f64;
    for n in 0..MAX_TERMS {
        let nf = n as f64;
        term = -term * (a + nf) * (a1b + nf) / ((nf + 1.0) * z);
        let t = term.norm();
        if t == 0.0 || t <= SERIES_EPS * sum.norm() {
            sum += term;
            dsum += (a + nf + 1.0) * term;
            let za = z.powc(-a);
            return Some((
                KummerResult {
                    value: za * sum,
                    method: KummerMethod::UAsymptotic,
                    terms_used: n + 1,
                    converged: true,
                    cancellation: biggest / sum.norm(),
                },
                -za * dsum / z,
            ));
        }
        // Past the smallest term the series only diverges.
        if t > prev && n > 2 {
            return None;
        }
        prev = t;
        biggest = biggest.max(t);
        sum += term;
        dsum += (a + nf + 1.0) * term;
    }
    None
}

/// Asymptotic series `U(a,b,z) ~ z^-a sum (a)_n (1+a-b)_n / n! (-z)^-n`,
/// summed up to its smallest term. `None` if that term is not below
/// `SERIES_EPS` relative to the sum.
pub fn kummer_u_asymptotic(a: Complex64, b: Complex64, z: Complex64) -> Option<KummerResult> {
    u_asymptotic_pair(a, b, z).map(|(r, _)| r)
}

const DE_LEVELS: usize = 8;
const DE_TAU_MAX: f64 = 4.0;
const DE_H0: f64 = 0.5;
/// Exp-sinh quadrature converges roughly quadratically per halving, so a
/// change of this size leaves an error near rounding level.
const DE_SETTLED: f64 = 1e-9;

/// Exp-sinh node `s = exp(pi/2 sinh tau)` with `ln s` and weight `ds/dtau`.
#[derive(Clone, Copy)]
struct DeNode {
    s: f64,
    ls: f64,
    jac: f64,
}

/// Nodes grouped by refinement level: level 0 holds every multiple of `DE_H0`
/// and level `k` the odd multiples of `DE_H0 / 2^k`. Nodes where `e^-s` is
/// negligible are dropped.
fn de_nodes() -> &'static [Vec<DeNode>] {
    static NODES: std::sync::OnceLock<Vec<Vec<DeNode>>> = std::sync::OnceLock::new();
    NODES.get_or_init(|| {
        let node = |tau: f64| {
            let ls = 0.5 * PI * tau.sinh();
            let s = ls.exp();
            DeNode {
                s,
                ls,
                jac: s * 0.5 * PI * tau.cosh(),
            }
        };
        let keep = |n: &DeNode| n.ls <= 6.0;
        let mut levels = Vec::with_capacity(DE_LEVELS + 1);
        let mut first = vec![node(0.0)];
        let mut k = 1;
        while k as f64 * DE_H0 <= DE_TAU_MAX {
            let t = k as f64 * DE_H0;
            first.push(node(t));
            first.push(node(-t));
            k += 1;
        }
        levels.push(first.into_iter().filter(keep).collect());
        let mut h = DE_H0;
        for _ in 0..DE_LEVELS {
            h *= 0.5;
            let mut level = Vec::new();
            let mut k = 1;
            while k as f64 * h <= DE_TAU_MAX {
                let t = k as f64 * h;
                level.push(node(t));
                level.push(node(-t));
                k += 2;
            }
            levels.push(level.into_iter().filter(keep).collect());
        }
        levels
    })
}

/// `int_0^inf e^-s s^(a-1) (1 + s/z)^e ds` with `e = b-a-1`, and the same
/// integral with an extra factor `e (1 + s/z)^-1 (-s/z^2)` (its `z`-derivative),
/// by exp-sinh quadrature on shared nodes.
fn laplace_integral(a: Complex64, b: Complex64, z: Complex64) -> Option<(Complex64, Complex64)> {
    let e = b - a - 1.0;
    let am1 = a - 1.0;
    let dz = -e / (z * z);
    let mut sum = (c(0.0, 0.0), c(0.0, 0.0));
    let mut h = DE_H0;
    let mut estimate = c(f64::NAN, 0.0);
    for (level, nodes) in de_nodes().iter().enumerate() {
        if level > 0 {
            h *= 0.5;
        }
        for n in nodes {
            let one_plus = c(1.0, 0.0) + n.s / z;
            let v = (am1 * n.ls + e * one_plus.ln() - n.s).exp() * n.jac;
            if v.re.is_finite() && v.im.is_finite() {
                sum.0 += v;
                sum.1 += v * n.s / one_plus;
            }
        }
        let next = sum.0 * h;
        if level > 0 && (next - estimate).norm() <= DE_SETTLED * next.norm() {
            return Some((next, sum.1 * h * dz));
        }
        estimate = next;
    }
    None
}

/// `(U, dU/dz)` from the Laplace-integral representation, valid for
/// `|arg z| < pi`. Small or negative `Re a` is handled by evaluating at
/// `a + m` and `a + m + 1` and recurring downwards in `a`, which is the
/// stable direction for `U`.
fn u_integral_pair(a: Complex64, b: Complex64, z: Complex64) -> Result<(KummerResult, Complex64)> {
    if z.norm() == 0.0 || (z.re < 0.0 && z.im.abs() < 1e-3 * z.norm()) {
        return Err(Error::invalid(format!("kummer_u_integral needs |arg z| < pi, got z = {z}")));
    }
    let shift = if a.re >= 1.0 { 0 } else { (1.0 - a.re).ceil() as usize };
    let direct = |a: Complex64| -> Result<(Complex64, Complex64)> {
        let (i0, i1) = laplace_integral(a, b, z).ok_or_else(|| Error::NonConvergence {
            method: "kummer_u_integral",
            detail: format!("quadrature did not settle at a = {a}, b = {b}, z = {z}"),
        })?;
        let pre = (-(a * z.ln()) - ln_gamma_complex(a)?).exp();
        let u = pre * i0;
        Ok((u, -a / z * u + pre * i1))
    };
    let (value, deriv) = if shift == 0 {
        direct(a)?
    } else {
        let top = a + shift as f64;
        let mut hi = direct(top + 1.0)?;
        let mut mid = direct(top)?;
        // U(a-1) = (2a - b + z) U(a) - a (a - b + 1) U(a+1), and its z-derivative
        for k in (0..shift).rev() {
            let ak = a + (k + 1) as f64;
            let p = 2.0 * ak - b + z;
            let q = ak * (ak - b + 1.0);
            let lo = (p * mid.0 - q * hi.0, mid.0 + p * mid.1 - q * hi.1);
            hi = mid;
            mid = lo;
        }
        mid
    };
    if !value.re.is_finite() || !value.im.is_finite() {
        return Err(Error::NonConvergence {
            method: "kummer_u_integral",
            detail: format!("non-finite value at a = {a}, b = {b}, z = {z}"),
        });
    }
    Ok((
        KummerResult {
            value,
            method: KummerMethod::UIntegral,
            terms_used: 0,
            converged: true,
            cancellation: 1.0,
        },
        deriv,
    ))
}

/// `U(a, b, z)` from its Laplace-integral representation, valid for `|arg z| < pi`.
pub fn kummer_u_integral(a: Complex64, b: Complex64, z: Complex64) -> Result<KummerResult> {
    u_integral_pair(a, b, z).map(|(r, _)| r)
}

/// Largest reflection-formula cancellation accepted by [`tricomi_u`] before
/// it switches to quadrature.
pub const U_REFLECTION_MAX_LOSS: f64 = 1e4;

/// `U(a, b, z)` by the most accurate available route: the asymptotic series
/// for large `|z|`, the reflection formula when it keeps at least twelve
/// digits and the integral representation otherwise.
pub fn tricomi_u(a: Complex64, b: Complex64, z: Complex64) -> Result<KummerResult> {
    tricomi_u_with_derivative(a, b, z).map(|(r, _)| r)
}

/// [`tricomi_u`] together with `dU/dz = -a U(a+1, b+1, z)`.
pub fn tricomi_u_with_derivative(a: Complex64, b: Complex64, z: Complex64) -> Result<(KummerResult, Complex64)> {
    if let Some(r) = u_asymptotic_pair(a, b, z) {
        return Ok(r);
    }
    // Rough loss of the reflection formula: exponential growth of the two M
    // terms over U, amplified near integer b by 1 / sin(pi b).
    let dist = (b.re - b.re.round()).abs().max(b.im.abs()).max(INTEGER_B_SHIFT);
    let predicted_loss = z.norm().exp() / dist.min(0.5);
    if predicted_loss > 1e2 * U_REFLECTION_MAX_LOSS {
        if let Ok(r) = u_integral_pair(a, b, z) {
            return Ok(r);
        }
    }
    let reflected = kummer_u_regularized(a, b, z).and_then(|r| {
        let d = kummer_u_regularized(a + 1.0, b + 1.0, z)?;
        Ok((r, d))
    });
    if let Ok((r, d)) = &reflected {
        if r.cancellation.max(d.cancellation) <= U_REFLECTION_MAX_LOSS {
            return Ok((*r, -a * d.value));
        }
    }
    match u_integral_pair(a, b, z) {
        Ok(r) => Ok(r),
        Err(e) => reflected.map(|(r, d)| (r, -a * d.value)).map_err(|_| e),
    }
}
