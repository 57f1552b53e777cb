//! Fourier inversion: semi-infinite quadrature, lattice sums in one and two
//! dimensions, and the marginal/joint densities and distribution functions
//! recovered from the characteristic function.
//!
//! The `u`-lattice is the symmetric trapezoid grid `u_k = k du`,
//! `|k| < N/2`. Lattice sums are evaluated either at arbitrary points (direct
//! summation, separable in 2D) or on the FFT-conjugate grid.

use std::f64::consts::PI;
use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;

use crate::charfn::CFContext;
use crate::error::{Error, Result};
use crate::model::NumericsConfig;


/// Largest isotonic correction accepted when cleaning a CDF.
pub const MAX_CLEANUP: f64 = 1e-3;
/// Most negative density value silently clamped to zero.
pub const PDF_FLOOR: f64 = -1e-6;
/// Width of default grids in standard deviations either side of the mean.
pub const GRID_HALF_WIDTH_SD: f64 = 12.0;

// ---------------------------------------------------------------------------
// Quadrature

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Legendre recurrence for P_n(z) and its derivative.
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else if n == 1 { z } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * pn - pm) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

#[derive(Debug, Clone)]
pub struct QuadSettings {
    /// Nodes of the coarse rule; the error estimate compares against `2 nodes`.
    pub nodes: usize,
    /// Absolute tolerance on the whole integral.
    pub tolerance: f64,
    pub max_panels: usize,
}

impl Default for QuadSettings {
    fn default() -> Self {
        Self {
            nodes: 16,
            tolerance: 1e-11,
            max_panels: 4000,
        }
    }
}

impl QuadSettings {
    pub fn from_config(cfg: &NumericsConfig) -> Self {
        Self {
            nodes: cfg.quad_nodes,
            tolerance: cfg.quad_tolerance,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QuadResult {
    pub value: Complex64,
    /// Sum of per-panel `|I_2n - I_n|`.
    pub error_estimate: f64,
    /// Rough size of what lies beyond the truncation point.
    pub tail_estimate: f64,
    pub panels: usize,
}

struct Rule {
    coarse: (Vec<f64>, Vec<f64>),
    fine: (Vec<f64>, Vec<f64>),
}

impl Rule {
    fn new(n: usize) -> Self {
        Self {
            coarse: gauss_legendre(n),
            fine: gauss_legendre(2 * n),
        }
    }

    fn apply(rule: &(Vec<f64>, Vec<f64>), f: &impl Fn(f64) -> Complex64, a: f64, b: f64) -> Complex64 {
        let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
        rule.0
            .iter()
            .zip(&rule.1)
            .map(|(x, w)| *w * f(mid + half * x))
            .sum::<Complex64>()
            * half
    }
}

/// Adaptive Gauss-Legendre on `[a, b]` by panel bisection.
pub fn quad_interval(f: impl Fn(f64) -> Complex64, a: f64, b: f64, settings: &QuadSettings) -> Result<QuadResult> {
    if !(a.is_finite() && b.is_finite()) || b < a || settings.nodes < 2 {
        return Err(Error::invalid(format!("bad quadrature interval [{a}, {b}]")));
    }
    if a == b {
        return Ok(QuadResult {
            value: Complex64::new(0.0, 0.0),
            error_estimate: 0.0,
            tail_estimate: 0.0,
            panels: 0,
        });
    }
    let rule = Rule::new(settings.nodes);
    let total = b - a;
    let mut stack: Vec<(f64, f64)> = (0..8)
        .rev()
        .map(|i| (a + total * i as f64 / 8.0, a + total * (i + 1) as f64 / 8.0))
        .collect();
    let mut value = Complex64::new(0.0, 0.0);
    let mut error = 0.0;
    let mut panels = 0;
    while let Some((lo, hi)) = stack.pop() {
        let coarse = Rule::apply(&rule.coarse, &f, lo, hi);
        let fine = Rule::apply(&rule.fine, &f, lo, hi);
        if !fine.is_finite() {
            return Err(Error::numerical(format!("integrand not finite on [{lo}, {hi}]")));
        }
        let err = (fine - coarse).norm();
        let local_tol = (settings.tolerance * (hi - lo) / total).max(4.0 * f64::EPSILON * fine.norm());
        if err <= local_tol || (hi - lo) < 1e-9 * total {
            value += fine;
            error += err;
            panels += 1;
        } else {
            let mid = 0.5 * (lo + hi);
            stack.push((mid, hi));
            stack.push((lo, mid));
        }
        if panels + stack.len() > settings.max_panels {
            return Err(Error::NonConvergence {
                method: "adaptive Gauss-Legendre",
                detail: format!("more than {} panels on [{a}, {b}]", settings.max_panels),
            });
        }
    }
    Ok(QuadResult {
        value,
        error_estimate: error,
        tail_estimate: 0.0,
        panels,
    })
}

/// `int_0^upper f(u) du` by adaptive Gauss-Legendre with `nodes`-point panels.
/// The tail estimate is `0.05 upper * max(|f|)` over the last 5% of the range.
pub fn quad_semi_infinite(f: impl Fn(f64) -> Complex64, upper: f64, nodes: usize) -> Result<QuadResult> {
    let settings = QuadSettings {
        nodes,
        ..QuadSettings::default()
    };
    quad_semi_infinite_with(f, upper, &settings)
}

pub fn quad_semi_infinite_with(
    f: impl Fn(f64) -> Complex64,
    upper: f64,
    settings: &QuadSettings,
) -> Result<QuadResult> {
    let mut r = quad_interval(&f, 0.0, upper, settings)?;
    let edge = f(upper).norm().max(f(0.95 * upper).norm());
    r.tail_estimate = 0.05 * upper * edge;
    Ok(r)
}

/// `int_start^inf f(u) du` for slowly decaying oscillatory integrands.
/// The range is cut into panels of width `panel` (ideally the spacing of
/// sign changes) whose partial sums are extrapolated by Wynn's epsilon
/// algorithm.
pub fn quad_oscillatory(
    f: impl Fn(f64) -> Complex64,
    start: f64,
    panel: f64,
    settings: &QuadSettings,
) -> Result<QuadResult> {
    if !(panel > 0.0) {
        return Err(Error::invalid("oscillatory panel width must be positive"));
    }
    let mut sums: Vec<Complex64> = Vec::new();
    let mut acc = Complex64::new(0.0, 0.0);
    let mut error = 0.0;
    let mut panels = 0;
    let mut last: Option<Complex64> = None;
    for k in 0..settings.max_panels {
        let lo = start + k as f64 * panel;
        let r = quad_interval(&f, lo, lo + panel, settings)?;
        acc += r.value;
        error += r.error_estimate;
        panels += r.panels;
        sums.push(acc);
        if sums.len() >= 8 {
            let est = wynn_epsilon(&sums);
            if let Some(prev) = last {
                let diff = (est - prev).norm();
                if diff < settings.tolerance.max(1e-15 * est.norm()) {
                    return Ok(QuadResult {
                        value: est,
                        error_estimate: error + diff,
                        tail_estimate: diff,
                        panels,
                    });
                }
            }
            last = Some(est);
        }
    }
    Err(Error::NonConvergence {
        method: "oscillatory quadrature",
        detail: format!("extrapolation unsettled after {} panels", settings.max_panels),
    })
}

/// Limit estimate of a sequence of partial sums by Wynn's epsilon algorithm.
fn wynn_epsilon(s: &[Complex64]) -> Complex64 {
    let n = s.len();
    // Use the last (odd-length) window so the final column is an even one.
    let m = if n % 2 == 1 { n } else { n - 1 };
    let s = &s[n - m..];
    let mut prev = vec![Complex64::new(0.0, 0.0); m + 1];
    let mut cur: Vec<Complex64> = s.to_vec();
    let mut best = s[m - 1];
    for col in 1..m {
        let next: Vec<Complex64> = (0..cur.len() - 1)
            .map(|i| {
                let d = cur[i + 1] - cur[i];
                let p = if col == 1 { Complex64::new(0.0, 0.0) } else { prev[i + 1] };
                if d.norm() < 1e-300 {
                    Complex64::new(f64::INFINITY, 0.0)
                } else {
                    p + 1.0 / d
                }
            })
            .collect();
        prev = cur;
        cur = next;
        if col % 2 == 0 {
            match cur.last() {
                Some(v) if v.is_finite() => best = *v,
                _ => break,
            }
        }
        if cur.len() < 2 {
            break;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Grid functions

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridKind {
    Cdf,
    Pdf,
}

/// Values on a sorted abscissa. CDFs interpolate by monotone cubic, PDFs
/// linearly.
#[derive(Debug, Clone)]
pub struct GridFunction1D {
    pub x: Vec<f64>,
    pub values: Vec<f64>,
    pub kind: GridKind,
    /// Largest change made by the isotonic/positivity cleanup.
    pub cleanup: f64,
    slopes: Vec<f64>,
}

impl GridFunction1D {
    pub fn new(x: Vec<f64>, values: Vec<f64>, kind: GridKind) -> Result<Self> {
        check_grid(&x)?;
        if values.len() != x.len() {
            return Err(Error::invalid("grid and value lengths differ"));
        }
        let slopes = match kind {
            GridKind::Cdf => pchip_slopes(&x, &values),
            GridKind::Pdf => Vec::new(),
        };
        Ok(Self {
            x,
            values,
            kind,
            cleanup: 0.0,
            slopes,
        })
    }

    pub fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        if t <= self.x[0] {
            return match self.kind {
                GridKind::Cdf => self.values[0],
                GridKind::Pdf if t == self.x[0] => self.values[0],
                GridKind::Pdf => 0.0,
            };
        }
        if t >= self.x[n - 1] {
            return match self.kind {
                GridKind::Cdf => self.values[n - 1],
                GridKind::Pdf if t == self.x[n - 1] => self.values[n - 1],
                GridKind::Pdf => 0.0,
            };
        }
        let i = self.x.partition_point(|&v| v <= t) - 1;
        let (x0, x1) = (self.x[i], self.x[i + 1]);
        let (y0, y1) = (self.values[i], self.values[i + 1]);
        let h = x1 - x0;
        let s = (t - x0) / h;
        match self.kind {
            GridKind::Pdf => y0 + s * (y1 - y0),
            GridKind::Cdf => {
                let (m0, m1) = (self.slopes[i], self.slopes[i + 1]);
                let s2 = s * s;
                let s3 = s2 * s;
                (2.0 * s3 - 3.0 * s2 + 1.0) * y0
                    + (s3 - 2.0 * s2 + s) * h * m0
                    + (-2.0 * s3 + 3.0 * s2) * y1
                    + (s3 - s2) * h * m1
            }
        }
    }

    /// Quantile of a CDF grid, accurate to 1e-10 in probability on the
    /// interpolant.
    pub fn inverse(&self, p: f64) -> Result<f64> {
        if self.kind != GridKind::Cdf {
            return Err(Error::invalid("inverse requested on a density grid"));
        }
        let n = self.x.len();
        if !(p >= self.values[0] && p <= self.values[n - 1]) {
            return Err(Error::invalid(format!(
                "probability {p} outside the grid's range [{}, {}]",
                self.values[0],
                self.values[n - 1]
            )));
        }
        let j = self.values.partition_point(|&v| v < p);
        if j == 0 {
            return Ok(self.x[0]);
        }
        let (mut lo, mut hi) = (self.x[j - 1], self.x[j.min(n - 1)]);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let v = self.eval(mid);
            if (v - p).abs() < 1e-12 || hi - lo < 1e-15 * (1.0 + mid.abs()) {
                return Ok(mid);
            }
            if v < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Trapezoid integral over the grid.
    pub fn integral(&self) -> f64 {
        self.x
            .windows(2)
            .zip(self.values.windows(2))
            .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
            .sum()
    }

    pub fn to_csv_writer(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["x", "value"])?;
        for (x, v) in self.x.iter().zip(&self.values) {
            wr.write_record([x.to_string(), v.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Values on a tensor grid, `values[i * y.len() + j]` at `(x[i], y[j])`,
/// bilinear in between.
#[derive(Debug, Clone)]
pub struct GridFunction2D {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub values: Vec<f64>,
    pub kind: GridKind,
    pub cleanup: f64,
}

impl GridFunction2D {
    pub fn new(x: Vec<f64>, y: Vec<f64>, values: Vec<f64>, kind: GridKind) -> Result<Self> {
        check_grid(&x)?;
        check_grid(&y)?;
        if values.len() != x.len() * y.len() {
            return Err(Error::invalid("value matrix does not match the grids"));
        }
        Ok(Self {
            x,
            y,
            values,
            kind,
            cleanup: 0.0,
        })
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.y.len() + j]
    }

    pub fn eval(&self, s: f64, t: f64) -> f64 {
        let (i, fx) = locate(&self.x, s);
        let (j, fy) = locate(&self.y, t);
        let v00 = self.at(i, j);
        let v10 = self.at(i + 1, j);
        let v01 = self.at(i, j + 1);
        let v11 = self.at(i + 1, j + 1);
        (1.0 - fx) * ((1.0 - fy) * v00 + fy * v01) + fx * ((1.0 - fy) * v10 + fy * v11)
    }

    /// Trapezoid integral over the rectangle spanned by the grids.
    pub fn integral(&self) -> f64 {
        let wx = trapezoid_weights(&self.x);
        let wy = trapezoid_weights(&self.y);
        let mut s = 0.0;
        for (i, a) in wx.iter().enumerate() {
            for (j, b) in wy.iter().enumerate() {
                s += a * b * self.at(i, j);
            }
        }
        s
    }

    /// Integrates out `y` by the trapezoid rule.
    pub fn marginalize_y(&self) -> Vec<f64> {
        let wy = trapezoid_weights(&self.y);
        (0..self.x.len())
            .map(|i| wy.iter().enumerate().map(|(j, w)| w * self.at(i, j)).sum())
            .collect()
    }

    pub fn to_csv_writer(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["x", "y", "value"])?;
        for (i, x) in self.x.iter().enumerate() {
            for (j, y) in self.y.iter().enumerate() {
                wr.write_record([x.to_string(), y.to_string(), self.at(i, j).to_string()])?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

fn check_grid(x: &[f64]) -> Result<()> {
    if x.len() < 2 {
        return Err(Error::invalid("grid needs at least two points"));
    }
    if x.iter().any(|v| !v.is_finite()) || x.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("grid must be finite and strictly increasing"));
    }
    Ok(())
}

/// Cell index and fractional position, clamped to the grid.
fn locate(g: &[f64], t: f64) -> (usize, f64) {
    let n = g.len();
    if t <= g[0] {
        return (0, 0.0);
    }
    if t >= g[n - 1] {
        return (n - 2, 1.0);
    }
    let i = g.partition_point(|&v| v <= t) - 1;
    (i, (t - g[i]) / (g[i + 1] - g[i]))
}

pub fn trapezoid_weights(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|i| {
            let left = if i > 0 { x[i] - x[i - 1] } else { 0.0 };
            let right = if i + 1 < n { x[i + 1] - x[i] } else { 0.0 };
            0.5 * (left + right)
        })
        .collect()
}

/// Fritsch-Carlson slopes for monotone cubic Hermite interpolation.
fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let d: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
    if n == 2 {
        return vec![d[0], d[0]];
    }
    let mut m = vec![0.0; n];
    for i in 1..n - 1 {
        if d[i - 1] * d[i] > 0.0 {
            let w1 = 2.0 * h[i] + h[i - 1];
            let w2 = h[i] + 2.0 * h[i - 1];
            m[i] = (w1 + w2) / (w1 / d[i - 1] + w2 / d[i]);
        }
    }
    let end = |h0: f64, h1: f64, d0: f64, d1: f64| {
        let s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
        if s * d0 <= 0.0 {
            0.0
        } else if d0 * d1 <= 0.0 && s.abs() > 3.0 * d0.abs() {
            3.0 * d0
        } else {
            s
        }
    };
    m[0] = end(h[0], h[1], d[0], d[1]);
    m[n - 1] = end(h[n - 2], h[n - 3], d[n - 2], d[n - 3]);
    m
}

/// Least-squares non-decreasing fit by pool-adjacent-violators.
pub fn isotonic_regression(y: &[f64]) -> Vec<f64> {
    // Blocks of (mean, count).
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(y.len());
    for &v in y {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (m1, c1) = blocks[blocks.len() - 1];
            let (m0, c0) = blocks[blocks.len() - 2];
            if m0 <= m1 {
                break;
            }
            blocks.pop();
            let c = c0 + c1;
            *blocks.last_mut().unwrap() = ((m0 * c0 as f64 + m1 * c1 as f64) / c as f64, c);
        }
    }
    blocks.into_iter().flat_map(|(m, c)| std::iter::repeat_n(m, c)).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn cleanup_cdf(raw: &[f64]) -> Result<(Vec<f64>, f64)> {
    let mut v = isotonic_regression(raw);
    for p in v.iter_mut() {
        *p = p.clamp(0.0, 1.0);
    }
    let change = max_abs_diff(raw, &v);
    if change > MAX_CLEANUP {
        return Err(Error::numerical(format!(
            "distribution function needs a correction of {change:.2e} to be monotone and bounded"
        )));
    }
    Ok((v, change))
}

fn cleanup_pdf(raw: &[f64]) -> Result<(Vec<f64>, f64)> {
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    if min < PDF_FLOOR {
        return Err(Error::numerical(format!("density reaches {min:.2e}")));
    }
    Ok((raw.iter().map(|v| v.max(0.0)).collect(), (-min).max(0.0)))
}

// ---------------------------------------------------------------------------
// Lattices

/// Symmetric trapezoid lattice `u_k = k du`, `-N/2 < k < N/2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lattice {
    pub size: usize,
    pub du: f64,
}

impl Lattice {
    pub fn new(size: usize, du: f64) -> Result<Self> {
        if size < 8 || !size.is_power_of_two() || !(du > 0.0) {
            return Err(Error::invalid(format!("bad lattice: size {size}, spacing {du}")));
        }
        Ok(Self { size, du })
    }

    pub fn default_1d(cfg: &NumericsConfig) -> Self {
        Self {
            size: cfg.fft_size_1d,
            du: cfg.fft_du_1d,
        }
    }

    pub fn default_2d(cfg: &NumericsConfig) -> Self {
        Self {
            size: cfg.fft_size_2d,
            du: cfg.fft_du_2d,
        }
    }

    /// Twice the points over the same `u` range.
    pub fn refined(self) -> Self {
        Self {
            size: 2 * self.size,
            du: 0.5 * self.du,
        }
    }

    fn half(&self) -> usize {
        self.size / 2
    }

    /// `u` at storage index `m`, where `m = k + N/2`.
    fn u(&self, m: usize) -> f64 {
        (m as f64 - self.half() as f64) * self.du
    }

    pub fn u_max(&self) -> f64 {
        (self.half() - 1) as f64 * self.du
    }

    /// Spacing of the FFT-conjugate `x` grid.
    pub fn dx(&self) -> f64 {
        2.0 * PI / (self.size as f64 * self.du)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Leg {
    First,
    Second,
}

impl Leg {
    fn args(self, u: Complex64) -> (Complex64, Complex64) {
        match self {
            Leg::First => (u, Complex64::new(0.0, 0.0)),
            Leg::Second => (Complex64::new(0.0, 0.0), u),
        }
    }
}

/// Sampled Fourier integrand on a 1D lattice. The inversion is
/// `e^{a x} / 2pi * du * Re sum_k e^{-i u_k x} h_k`.
#[derive(Debug, Clone)]
pub struct Spectrum1D {
    lattice: Lattice,
    damping: f64,
    /// Indexed by `m = k + N/2`; the `k = -N/2` slot is zero.
    h: Vec<Complex64>,
}

impl Spectrum1D {
    /// Builds `h(u) = g(u)` from values at `u >= 0`, filling `u < 0` by
    /// Hermitian symmetry.
    fn from_half(lattice: Lattice, damping: f64, g: impl Fn(f64) -> Result<Complex64> + Sync) -> Result<Self> {
        let n = lattice.size;
        let half = lattice.half();
        let pos: Vec<Complex64> = (half..n).into_par_iter().map(|m| g(lattice.u(m))).collect::<Result<_>>()?;
        let mut h = vec![Complex64::new(0.0, 0.0); n];
        for (k, v) in pos.iter().enumerate() {
            h[half + k] = *v;
            if k > 0 {
                h[half - k] = v.conj();
            }
        }
        Ok(Self { lattice, damping, h })
    }

    pub fn lattice(&self) -> Lattice {
        self.lattice
    }

    pub fn eval(&self, x: f64) -> f64 {
        let s: f64 = self
            .h
            .iter()
            .enumerate()
            .map(|(m, h)| (Complex64::cis(-self.lattice.u(m) * x) * h).re)
            .sum();
        (self.damping * x).exp() * self.lattice.du / (2.0 * PI) * s
    }

    pub fn eval_many(&self, xs: &[f64]) -> Vec<f64> {
        xs.par_iter().map(|&x| self.eval(x)).collect()
    }

    /// All `N` values on the conjugate grid `x_j = center + (j - N/2) dx`
    /// by one FFT.
    pub fn eval_fft(&self, center: f64) -> (Vec<f64>, Vec<f64>) {
        let n = self.lattice.size;
        let dx = self.lattice.dx();
        let x0 = center - self.lattice.half() as f64 * dx;
        let mut buf: Vec<Complex64> = self
            .h
            .iter()
            .enumerate()
            .map(|(m, h)| h * Complex64::cis(-self.lattice.u(m) * x0))
            .collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let scale = self.lattice.du / (2.0 * PI);
        let xs: Vec<f64> = (0..n).map(|j| x0 + j as f64 * dx).collect();
        let vals = buf
            .iter()
            .enumerate()
            .map(|(j, v)| {
                // u_m = (m - N/2) du contributes exp(i pi j) per index shift.
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                (self.damping * xs[j]).exp() * scale * sign * v.re
            })
            .collect();
        (xs, vals)
    }
}

/// Sampled Fourier integrand on a sheared 2D lattice `u = M k`, with `M`
/// lower triangular so the inversion still separates into two passes.
///
/// `M = du U^{-T}` where `U U^T` is the (upper-triangular factored) return
/// covariance: in these coordinates the characteristic function decays at
/// the same rate in every direction, so strongly correlated legs do not
/// need a huge axis-aligned lattice.
#[derive(Debug, Clone)]
pub struct Spectrum2D {
    lattice: Lattice,
    damping: (f64, f64),
    /// `(M11, M21, M22)`.
    shear: (f64, f64, f64),
    /// Row-major over `(m1, m2)`.
    h: Vec<Complex64>,
}

/// Shear for covariance `[[c11, c12], [c12, c22]]`. Near-singular
/// covariances are floored so the lattice stays finite along the null
/// direction.
pub fn whitening_shear(c11: f64, c12: f64, c22: f64, du: f64) -> Result<(f64, f64, f64)> {
    if !(c11 > 0.0 && c22 > 0.0) {
        return Err(Error::invalid("whitening needs positive variances on both legs"));
    }
    let r = c22.sqrt();
    let q = c12 / r;
    let p = (c11 - q * q).max(0.09 * c11).sqrt();
    Ok((du / p, -du * q / (p * r), du / r))
}

impl Spectrum2D {
    fn from_half(
        lattice: Lattice,
        shear: (f64, f64, f64),
        damping: (f64, f64),
        g: impl Fn(f64, f64) -> Result<Complex64> + Sync,
    ) -> Result<Self> {
        let n = lattice.size;
        let half = lattice.half();
        let k = |m: usize| m as f64 - half as f64;
        let node = |m1: usize, m2: usize| (shear.0 * k(m1), shear.1 * k(m1) + shear.2 * k(m2));
        // Upper half-plane m1 >= N/2, skipping the unpaired k = -N/2 column.
        let rows: Vec<Vec<Complex64>> = (half..n)
            .into_par_iter()
            .map(|m1| {
                let start = if m1 == half { half } else { 1 };
                (start..n)
                    .map(|m2| {
                        let (u1, u2) = node(m1, m2);
                        g(u1, u2)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let mut h = vec![Complex64::new(0.0, 0.0); n * n];
        for (r, row) in rows.iter().enumerate() {
            let m1 = half + r;
            let start = if m1 == half { half } else { 1 };
            for (c, v) in row.iter().enumerate() {
                let m2 = start + c;
                h[m1 * n + m2] = *v;
                h[(n - m1) * n + (n - m2)] = v.conj();
            }
        }
        Ok(Self {
            lattice,
            damping,
            shear,
            h,
        })
    }

    pub fn lattice(&self) -> Lattice {
        self.lattice
    }

    fn scale(&self, x: f64, y: f64) -> f64 {
        let det = self.shear.0 * self.shear.2;
        (self.damping.0 * x + self.damping.1 * y).exp() * det / (4.0 * PI * PI)
    }

    /// Row `j` holds `e^{-i k1 M21 y_j} sum_k2 h[k1, k2] e^{-i k2 M22 y_j}`.
    fn contract_second(&self, ys: &[f64]) -> Vec<Complex64> {
        let n = self.lattice.size;
        let half = self.lattice.half() as f64;
        let (_, m21, m22) = self.shear;
        let mut t = vec![Complex64::new(0.0, 0.0); ys.len() * n];
        t.par_chunks_mut(n).zip(ys.par_iter()).for_each(|(row, &y)| {
            let e2: Vec<Complex64> = (0..n).map(|m| Complex64::cis(-(m as f64 - half) * m22 * y)).collect();
            for (m1, r) in row.iter_mut().enumerate().skip(1) {
                let hrow = &self.h[m1 * n..(m1 + 1) * n];
                let s: Complex64 = hrow.iter().zip(&e2).map(|(h, e)| h * e).sum();
                *r = s * Complex64::cis(-(m1 as f64 - half) * m21 * y);
            }
        });
        t
    }

    fn finish(&self, trow: &[Complex64], x: f64) -> f64 {
        let half = self.lattice.half() as f64;
        let m11 = self.shear.0;
        trow.iter()
            .enumerate()
            .skip(1)
            .map(|(m1, t)| (t * Complex64::cis(-(m1 as f64 - half) * m11 * x)).re)
            .sum()
    }

    /// Values on the tensor grid `xs x ys`, row-major in `x`.
    pub fn eval_grid(&self, xs: &[f64], ys: &[f64]) -> Vec<f64> {
        let n = self.lattice.size;
        let t = self.contract_second(ys);
        let cols: Vec<Vec<f64>> = (0..ys.len())
            .into_par_iter()
            .map(|j| {
                let trow = &t[j * n..(j + 1) * n];
                xs.iter().map(|&x| self.scale(x, ys[j]) * self.finish(trow, x)).collect()
            })
            .collect();
        let mut out = vec![0.0; xs.len() * ys.len()];
        for (j, col) in cols.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                out[i * ys.len() + j] = *v;
            }
        }
        out
    }

    /// Values at the point pairs `(xs[i], ys[i])`.
    pub fn eval_pairs(&self, xs: &[f64], ys: &[f64]) -> Vec<f64> {
        assert_eq!(xs.len(), ys.len());
        let n = self.lattice.size;
        let t = self.contract_second(ys);
        (0..xs.len())
            .into_par_iter()
            .map(|i| self.scale(xs[i], ys[i]) * self.finish(&t[i * n..(i + 1) * n], xs[i]))
            .collect()
    }

    /// Values at `(x, ys[j])` for every `x` in `xs[j]`, sharing the
    /// expensive contraction over each `y`.
    pub fn eval_columns(&self, ys: &[f64], xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        assert_eq!(xs.len(), ys.len());
        let n = self.lattice.size;
        let t = self.contract_second(ys);
        (0..ys.len())
            .into_par_iter()
            .map(|j| {
                let trow = &t[j * n..(j + 1) * n];
                xs[j].iter().map(|&x| self.scale(x, ys[j]) * self.finish(trow, x)).collect()
            })
            .collect()
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.eval_pairs(&[x], &[y])[0]
    }
}


fn check_damping(ctx: &CFContext, d: (f64, f64), a: f64) -> Result<()> {
    if !(a > 0.0) {
        return Err(Error::invalid(format!("smoothing parameter must be positive, got {a}")));
    }
    let bound = ctx.strip_bound(d.0, d.1, a);
    if bound < a {
        return Err(Error::invalid(format!(
            "smoothing {a} exceeds the moment strip (characteristic function explodes at {bound:.4})"
        )));
    }
    Ok(())
}

/// Spectrum of the marginal CDF of one leg with smoothing `a`.
pub fn marginal_cdf_spectrum(ctx: &CFContext, leg: Leg, a: f64, lattice: Lattice) -> Result<Spectrum1D> {
    let dir = match leg {
        Leg::First => (-1.0, 0.0),
        Leg::Second => (0.0, -1.0),
    };
    check_damping(ctx, dir, a)?;
    Spectrum1D::from_half(lattice, a, |u| {
        let (u1, u2) = leg.args(Complex64::new(u, a));
        Ok(ctx.phi(u1, u2)? / Complex64::new(a, -u))
    })
}

pub fn marginal_pdf_spectrum(ctx: &CFContext, leg: Leg, lattice: Lattice) -> Result<Spectrum1D> {
    Spectrum1D::from_half(lattice, 0.0, |u| {
        let (u1, u2) = leg.args(Complex64::new(u, 0.0));
        ctx.phi(u1, u2)
    })
}

fn context_shear(ctx: &CFContext, lattice: Lattice) -> Result<(f64, f64, f64)> {
    let (t, t1, t2) = ctx.maturities();
    let m = ctx.model();
    whitening_shear(
        m.expected_covariance(t, t1, t1),
        m.expected_covariance(t, t1, t2),
        m.expected_covariance(t, t2, t2),
        lattice.du,
    )
}

/// Spectrum of the joint CDF; `lattice.du` is the spacing in whitened
/// coordinates.
pub fn joint_cdf_spectrum(ctx: &CFContext, a1: f64, a2: f64, lattice: Lattice) -> Result<Spectrum2D> {
    if !(a1 > 0.0 && a2 > 0.0) {
        return Err(Error::invalid("smoothing parameters must be positive"));
    }
    let norm = a1.hypot(a2);
    check_damping(ctx, (-a1 / norm, -a2 / norm), norm)?;
    let shear = context_shear(ctx, lattice)?;
    Spectrum2D::from_half(lattice, shear, (a1, a2), |u1, u2| {
        let z1 = Complex64::new(u1, a1);
        let z2 = Complex64::new(u2, a2);
        Ok(ctx.phi(z1, z2)? / (Complex64::new(a1, -u1) * Complex64::new(a2, -u2)))
    })
}

pub fn joint_pdf_spectrum(ctx: &CFContext, lattice: Lattice) -> Result<Spectrum2D> {
    let shear = context_shear(ctx, lattice)?;
    Spectrum2D::from_half(lattice, shear, (0.0, 0.0), |u1, u2| {
        ctx.phi(Complex64::new(u1, 0.0), Complex64::new(u2, 0.0))
    })
}


/// Marginal distribution function of `X_leg` on `x_grid`, cleaned to be
/// monotone and within `[0, 1]`.
pub fn marginal_cdf(ctx: &CFContext, leg: Leg, a: f64, x_grid: &[f64], lattice: Lattice) -> Result<GridFunction1D> {
    check_grid(x_grid)?;
    let raw = marginal_cdf_spectrum(ctx, leg, a, lattice)?.eval_many(x_grid);
    let (values, cleanup) = cleanup_cdf(&raw)?;
    let mut g = GridFunction1D::new(x_grid.to_vec(), values, GridKind::Cdf)?;
    g.cleanup = cleanup;
    Ok(g)
}

pub fn marginal_pdf(ctx: &CFContext, leg: Leg, x_grid: &[f64], lattice: Lattice) -> Result<GridFunction1D> {
    check_grid(x_grid)?;
    let raw = marginal_pdf_spectrum(ctx, leg, lattice)?.eval_many(x_grid);
    let (values, cleanup) = cleanup_pdf(&raw)?;
    let mut g = GridFunction1D::new(x_grid.to_vec(), values, GridKind::Pdf)?;
    g.cleanup = cleanup;
    Ok(g)
}

/// Joint distribution function on `x_grid x y_grid`. Cleanup runs the
/// isotonic fit along rows then columns; the fit is order preserving, so
/// both directions end up non-decreasing.
pub fn joint_cdf(
    ctx: &CFContext,
    a1: f64,
    a2: f64,
    x_grid: &[f64],
    y_grid: &[f64],
    lattice: Lattice,
) -> Result<GridFunction2D> {
    check_grid(x_grid)?;
    check_grid(y_grid)?;
    let raw = joint_cdf_spectrum(ctx, a1, a2, lattice)?.eval_grid(x_grid, y_grid);
    let (nx, ny) = (x_grid.len(), y_grid.len());
    let mut v = raw.clone();
    for row in v.chunks_mut(ny) {
        let fit = isotonic_regression(row);
        row.copy_from_slice(&fit);
    }
    for j in 0..ny {
        let col: Vec<f64> = (0..nx).map(|i| v[i * ny + j]).collect();
        for (i, c) in isotonic_regression(&col).into_iter().enumerate() {
            v[i * ny + j] = c.clamp(0.0, 1.0);
        }
    }
    let cleanup = max_abs_diff(&raw, &v);
    if cleanup > MAX_CLEANUP {
        return Err(Error::numerical(format!(
            "joint distribution function needs a correction of {cleanup:.2e}"
        )));
    }
    let mut g = GridFunction2D::new(x_grid.to_vec(), y_grid.to_vec(), v, GridKind::Cdf)?;
    g.cleanup = cleanup;
    Ok(g)
}

pub fn joint_pdf(ctx: &CFContext, x_grid: &[f64], y_grid: &[f64], lattice: Lattice) -> Result<GridFunction2D> {
    check_grid(x_grid)?;
    check_grid(y_grid)?;
    let raw = joint_pdf_spectrum(ctx, lattice)?.eval_grid(x_grid, y_grid);
    let (values, cleanup) = cleanup_pdf(&raw)?;
    let mut g = GridFunction2D::new(x_grid.to_vec(), y_grid.to_vec(), values, GridKind::Pdf)?;
    g.cleanup = cleanup;
    Ok(g)
}

/// Mean and standard deviation of `X_leg` under mean variance paths; used
/// to place grids.
pub fn leg_moments(ctx: &CFContext, leg: Leg) -> (f64, f64) {
    let (t, t1, t2) = ctx.maturities();
    let tm = match leg {
        Leg::First => t1,
        Leg::Second => t2,
    };
    let var = ctx.model().expected_covariance(t, tm, tm);
    (-0.5 * var, var.sqrt())
}

/// `n` equally spaced points over mean +/- 12 standard deviations.
pub fn default_grid(ctx: &CFContext, leg: Leg, n: usize) -> Vec<f64> {
    let (mean, sd) = leg_moments(ctx, leg);
    let w = GRID_HALF_WIDTH_SD * sd.max(1e-8);
    linspace(mean - w, mean + w, n)
}

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        for n in [2, 5, 16, 32] {
            let (x, w) = gauss_legendre(n);
            for p in 0..2 * n {
                let got: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(p as i32)).sum();
                let want = if p % 2 == 1 { 0.0 } else { 2.0 / (p as f64 + 1.0) };
                assert!((got - want).abs() < 1e-13, "n={n} p={p}: {got}");
            }
        }
    }

    #[test]
    fn isotonic_pools_violators() {
        assert_eq!(isotonic_regression(&[1.0, 3.0, 2.0, 4.0]), vec![1.0, 2.5, 2.5, 4.0]);
        assert_eq!(isotonic_regression(&[3.0, 2.0, 1.0]), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn pchip_keeps_monotone_data_monotone() {
        let x = vec![0.0, 1.0, 2.0, 3.0, 4.0];
        let y = vec![0.0, 0.0, 0.5, 1.0, 1.0];
        let g = GridFunction1D::new(x, y, GridKind::Cdf).unwrap();
        let mut prev = -1.0;
        for i in 0..=400 {
            let v = g.eval(i as f64 / 100.0);
            assert!(v >= prev - 1e-15 && (0.0..=1.0).contains(&v));
            prev = v;
        }
        let q = g.inverse(0.3).unwrap();
        assert!((g.eval(q) - 0.3).abs() < 1e-10);
    }
}
