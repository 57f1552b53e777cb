//! Domain types shared by every other module: model parameters, the initial
//! futures curve, contract descriptors and numerical settings.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::charfn::Backend;
use crate::error::{Error, Result};

/// Parameters of one CIR/Heston variance factor with Samuelson damping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorParams {
    /// Mean-reversion speed of the variance.
    pub kappa: f64,
    /// Long-run variance level.
    pub theta: f64,
    /// Volatility of variance.
    pub sigma: f64,
    /// Correlation between the futures driver and the variance driver.
    pub rho: f64,
    /// Initial variance.
    pub v0: f64,
    /// Damping rate applied as `exp(-lambda (T_m - t))`.
    pub lambda: f64,
}

impl FactorParams {
    pub fn feller_ratio(&self) -> f64 {
        2.0 * self.kappa * self.theta / (self.sigma * self.sigma)
    }
}

/// A deterministic (log-normal) volatility factor `sigma_hat * exp(-lambda (T_m - t))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeterministicFactor {
    pub sigma_hat: f64,
    pub lambda: f64,
}

/// Full model: stochastic-volatility factors plus optional deterministic factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub factors: Vec<FactorParams>,
    #[serde(default)]
    pub deterministic_factors: Vec<DeterministicFactor>,
}

/// Severity of a validation finding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Severity {
    Violation,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Finding {
    pub severity: Severity,
    pub message: String,
}

impl ModelParams {
    pub fn new(factors: Vec<FactorParams>) -> Self {
        Self {
            factors,
            deterministic_factors: Vec::new(),
        }
    }

    /// Pure deterministic-volatility model with the given `(sigma_hat, lambda)` factors.
    pub fn clewlow_strickland(factors: &[(f64, f64)]) -> Self {
        Self {
            factors: Vec::new(),
            deterministic_factors: factors
                .iter()
                .map(|&(sigma_hat, lambda)| DeterministicFactor { sigma_hat, lambda })
                .collect(),
        }
    }

    /// The illustrative two-factor parameter set used throughout the tests and
    /// examples: a slowly damped volatile factor and a quickly damped calm one.
    pub fn reference_sv2f() -> Self {
        Self::new(vec![
            FactorParams {
                kappa: 1.0,
                theta: 0.16,
                sigma: 0.25,
                rho: 0.0,
                v0: 0.16,
                lambda: 0.10,
            },
            FactorParams {
                kappa: 1.0,
                theta: 0.09,
                sigma: 0.20,
                rho: 0.0,
                v0: 0.09,
                lambda: 2.00,
            },
        ])
    }

    pub fn n_factors(&self) -> usize {
        self.factors.len() + self.deterministic_factors.len()
    }

    /// Expected integrated covariance of the returns of the `t1` and `t2`
    /// contracts over `[0, t]`. Exact for deterministic factors; for the
    /// stochastic ones the variance path is replaced by its mean.
    pub fn expected_covariance(&self, t: f64, t1: f64, t2: f64) -> f64 {
        // int_0^t exp(c s) ds
        let growth = |c: f64| if (c * t).abs() < 1e-12 { t } else { (c * t).exp_m1() / c };
        let stochastic: f64 = self
            .factors
            .iter()
            .map(|f| {
                let l = f.lambda;
                let damp = (-l * (t1 + t2)).exp();
                damp * (f.theta * growth(2.0 * l) + (f.v0 - f.theta) * growth(2.0 * l - f.kappa))
            })
            .sum();
        let deterministic: f64 = self
            .deterministic_factors
            .iter()
            .map(|d| d.sigma_hat * d.sigma_hat * (-d.lambda * (t1 + t2)).exp() * growth(2.0 * d.lambda))
            .sum();
        stochastic + deterministic
    }

    /// Reports every violated invariant plus non-fatal Feller warnings.
    pub fn validate(&self) -> Vec<Finding> {
        let mut out = Vec::new();
        let mut bad = |msg: String| {
            out.push(Finding {
                severity: Severity::Violation,
                message: msg,
            })
        };
        if self.n_factors() == 0 {
            bad("model has no factors".into());
        }
        for (j, f) in self.factors.iter().enumerate() {
            let checks: [(&str, f64, bool); 6] = [
                ("kappa", f.kappa, f.kappa > 0.0),
                ("theta", f.theta, f.theta > 0.0),
                ("sigma", f.sigma, f.sigma > 0.0),
                ("v0", f.v0, f.v0 > 0.0),
                ("lambda", f.lambda, f.lambda >= 0.0),
                ("rho", f.rho, f.rho > -1.0 && f.rho < 1.0),
            ];
            for (name, value, ok) in checks {
                if !ok || !value.is_finite() {
                    bad(format!("factor {j}: {name} = {value} out of range"));
                }
            }
        }
        for (j, d) in self.deterministic_factors.iter().enumerate() {
            if !(d.sigma_hat >= 0.0) {
                bad(format!("deterministic factor {j}: sigma_hat = {} out of range", d.sigma_hat));
            }
            if !(d.lambda >= 0.0) {
                bad(format!("deterministic factor {j}: lambda = {} out of range", d.lambda));
            }
        }
        for (j, f) in self.factors.iter().enumerate() {
            let ratio = f.feller_ratio();
            if ratio.is_finite() && ratio < 1.0 {
                out.push(Finding {
                    severity: Severity::Warning,
                    message: format!("factor {j}: Feller ratio 2*kappa*theta/sigma^2 = {ratio:.4} < 1"),
                });
            }
        }
        out
    }

    /// Returns only the fatal findings.
    pub fn violations(&self) -> Vec<String> {
        self.validate()
            .into_iter()
            .filter(|f| f.severity == Severity::Violation)
            .map(|f| f.message)
            .collect()
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidInput(v.join("; ")))
        }
    }

    pub fn from_json_reader(r: impl Read) -> Result<Self> {
        Ok(serde_json::from_reader(r)?)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::from_json_reader(std::io::BufReader::new(f))
    }

    pub fn to_json_writer(&self, w: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }
}

/// How the futures curve is read between quoted maturities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CurveInterpolation {
    /// Linear in `ln F`.
    #[default]
    LogLinear,
    /// Linear in `F`.
    Linear,
}

/// Initial futures prices `F(0, T_m)` by maturity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuturesCurve {
    points: Vec<(f64, f64)>,
    #[serde(default)]
    pub interpolation: CurveInterpolation,
}

impl FuturesCurve {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("futures curve has no points"));
        }
        for w in points.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(Error::invalid(format!(
                    "futures curve maturities not strictly increasing at {}",
                    w[1].0
                )));
            }
        }
        for &(t, p) in &points {
            if !(p > 0.0) || !p.is_finite() || !t.is_finite() {
                return Err(Error::invalid(format!("futures price {p} at maturity {t} must be positive")));
            }
        }
        Ok(Self {
            points,
            interpolation: CurveInterpolation::LogLinear,
        })
    }

    /// A curve with the same price at every maturity.
    pub fn flat(price: f64) -> Self {
        Self::new(vec![(0.0, price)]).expect("flat curve")
    }

    pub fn with_interpolation(mut self, interpolation: CurveInterpolation) -> Self {
        self.interpolation = interpolation;
        self
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// `F(0, T)`; flat extrapolation beyond the quoted range.
    pub fn price(&self, maturity: f64) -> f64 {
        let pts = &self.points;
        if maturity <= pts[0].0 {
            return pts[0].1;
        }
        let last = pts[pts.len() - 1];
        if maturity >= last.0 {
            return last.1;
        }
        let i = pts.partition_point(|p| p.0 <= maturity);
        let (t0, p0) = pts[i - 1];
        if t0 == maturity {
            return p0;
        }
        let (t1, p1) = pts[i];
        let w = (maturity - t0) / (t1 - t0);
        match self.interpolation {
            CurveInterpolation::LogLinear => (p0.ln() * (1.0 - w) + p1.ln() * w).exp(),
            CurveInterpolation::Linear => p0 * (1.0 - w) + p1 * w,
        }
    }

    /// Reads a `maturity,price` CSV.
    pub fn from_csv_reader(r: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let headers = rdr.headers()?.clone();
        if headers.len() != 2 || &headers[0] != "maturity" || &headers[1] != "price" {
            return Err(Error::Parse {
                line: Some(1),
                msg: format!("expected header `maturity,price`, found `{}`", headers.iter().collect::<Vec<_>>().join(",")),
            });
        }
        let mut points = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line() as usize);
            let parse = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| Error::Parse {
                        line,
                        msg: format!("field {} is not a number", i + 1),
                    })
            };
            points.push((parse(0)?, parse(1)?));
        }
        Self::new(points)
    }

    pub fn from_csv_file(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::from_csv_reader(f)
    }

    pub fn to_csv_writer(&self, w: impl Write) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["maturity", "price"])?;
        for &(t, p) in &self.points {
            wtr.write_record([format!("{t}"), format!("{p}")])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptionKind {
    Call,
    Put,
}

/// European option on one futures contract.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VanillaContract {
    pub expiry: f64,
    pub futures_maturity: f64,
    pub strike: f64,
    pub kind: OptionKind,
    pub rate: f64,
}

impl VanillaContract {
    pub fn validate(&self) -> Result<()> {
        if !(self.expiry > 0.0 && self.expiry <= self.futures_maturity) {
            return Err(Error::invalid(format!(
                "need 0 < T <= T_m, got T = {}, T_m = {}",
                self.expiry, self.futures_maturity
            )));
        }
        if !(self.strike > 0.0) {
            return Err(Error::invalid(format!("strike {} must be positive", self.strike)));
        }
        Ok(())
    }
}

/// Calendar spread option on `F(T, T1) - F(T, T2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CsoContract {
    pub expiry: f64,
    pub t1: f64,
    pub t2: f64,
    /// May be negative.
    pub strike: f64,
    pub kind: OptionKind,
    pub rate: f64,
}

impl CsoContract {
    pub fn validate(&self) -> Result<()> {
        if !(self.expiry > 0.0 && self.expiry <= self.t1 && self.t1 < self.t2) {
            return Err(Error::invalid(format!(
                "need 0 < T <= T1 < T2, got T = {}, T1 = {}, T2 = {}",
                self.expiry, self.t1, self.t2
            )));
        }
        if !self.strike.is_finite() {
            return Err(Error::invalid("strike must be finite"));
        }
        Ok(())
    }

    pub fn with_strike(mut self, strike: f64) -> Self {
        self.strike = strike;
        self
    }

    pub fn with_kind(mut self, kind: OptionKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn discount(&self) -> f64 {
        (-self.rate * self.expiry).exp()
    }
}

/// Numerical settings shared by the Fourier, Monte Carlo and root-finding code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NumericsConfig {
    /// Upper integration limit for semi-infinite Fourier integrals.
    pub quad_upper_limit: f64,
    /// Gauss-Legendre order per panel.
    pub quad_nodes: usize,
    /// Absolute tolerance of the adaptive quadrature.
    pub quad_tolerance: f64,
    pub fft_size_1d: usize,
    pub fft_du_1d: f64,
    pub fft_size_2d: usize,
    /// Spacing of the 2D lattice in covariance-whitened coordinates.
    pub fft_du_2d: f64,
    /// Damping in the one-dimensional spread formula.
    pub carr_madan_delta: f64,
    /// Smoothing for marginal CDF inversion.
    pub smoothing_a: f64,
    pub smoothing_a1: f64,
    pub smoothing_a2: f64,
    /// Contour shift for the two-dimensional spread transform.
    pub hz_epsilon: [f64; 2],
    /// Solver for the characteristic function's Riccati equations.
    pub cf_backend: Backend,
    pub hz_size: usize,
    pub hz_du: f64,
    pub mc_paths: usize,
    pub mc_steps_per_year: usize,
    pub mc_seed: u64,
    /// Absolute price tolerance for root finders.
    pub root_price_tolerance: f64,
    /// Argument tolerance for root finders.
    pub root_x_tolerance: f64,
}

impl Default for NumericsConfig {
    fn default() -> Self {
        Self {
            quad_upper_limit: 200.0,
            quad_nodes: 16,
            quad_tolerance: 1e-11,
            fft_size_1d: 4096,
            fft_du_1d: 0.05,
            fft_size_2d: 256,
            fft_du_2d: 0.1,
            carr_madan_delta: 1.0,
            smoothing_a: 3.0,
            smoothing_a1: 3.0,
            smoothing_a2: 3.0,
            hz_epsilon: [-3.0, 1.5],
            cf_backend: Backend::ClosedForm,
            hz_size: 512,
            hz_du: 0.2,
            mc_paths: 100_000,
            mc_steps_per_year: 200,
            mc_seed: 20_150_701,
            root_price_tolerance: 1e-10,
            root_x_tolerance: 1e-12,
        }
    }
}

impl NumericsConfig {
    pub fn validate(&self) -> Result<()> {
        let pow2 = |n: usize| n >= 256 && n.is_power_of_two();
        if !pow2(self.fft_size_1d) || !pow2(self.fft_size_2d) || !pow2(self.hz_size) {
            return Err(Error::invalid("FFT sizes must be powers of two >= 256"));
        }
        let positive = [
            ("carr_madan_delta", self.carr_madan_delta),
            ("smoothing_a", self.smoothing_a),
            ("smoothing_a1", self.smoothing_a1),
            ("smoothing_a2", self.smoothing_a2),
            ("quad_upper_limit", self.quad_upper_limit),
            ("quad_tolerance", self.quad_tolerance),
            ("fft_du_1d", self.fft_du_1d),
            ("fft_du_2d", self.fft_du_2d),
            ("hz_du", self.hz_du),
            ("root_price_tolerance", self.root_price_tolerance),
            ("root_x_tolerance", self.root_x_tolerance),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.quad_nodes < 2 {
            return Err(Error::invalid("quad_nodes must be at least 2"));
        }
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let cfg: Self = serde_json::from_reader(std::io::BufReader::new(f))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_parameters_are_valid() {
        assert!(ModelParams::reference_sv2f().validate().is_empty());
    }

    #[test]
    fn negative_kappa_is_one_violation() {
        let mut m = ModelParams::reference_sv2f();
        m.factors[0].kappa = -1.0;
        let v = m.violations();
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("kappa"));
    }

    #[test]
    fn rho_boundary_is_excluded() {
        let mut m = ModelParams::reference_sv2f();
        m.factors[1].rho = 1.0;
        let v = m.violations();
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("rho"));
    }

    #[test]
    fn feller_violation_is_only_a_warning() {
        let mut m = ModelParams::reference_sv2f();
        m.factors[0].sigma = 1.0;
        let found = m.validate();
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].severity, Severity::Warning);
        assert!(m.violations().is_empty());
    }

    #[test]
    fn feller_ratios_of_reference_set() {
        let m = ModelParams::reference_sv2f();
        assert!((m.factors[0].feller_ratio() - 5.12).abs() < 1e-12);
        assert!((m.factors[1].feller_ratio() - 4.5).abs() < 1e-12);
    }

    #[test]
    fn curve_returns_quoted_points_exactly() {
        let c = FuturesCurve::new(vec![(0.25, 71.3), (0.5, 72.9), (1.0, 74.15)]).unwrap();
        for &(t, p) in c.points() {
            assert_eq!(c.price(t), p);
        }
        let mid = c.price(0.75);
        assert!(mid > 72.9 && mid < 74.15);
        assert_eq!(c.price(0.0), 71.3);
        assert_eq!(c.price(5.0), 74.15);
    }

    #[test]
    fn curve_rejects_bad_points() {
        assert!(FuturesCurve::new(vec![(1.0, 10.0), (1.0, 11.0)]).is_err());
        assert!(FuturesCurve::new(vec![(1.0, -10.0)]).is_err());
    }

    #[test]
    fn malformed_curve_csv_reports_line() {
        let data = "maturity,price\n0.5,70\n1.0,abc\n";
        match FuturesCurve::from_csv_reader(data.as_bytes()) {
            Err(Error::Parse { line: Some(3), .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn json_layout_matches_documented_schema() {
        let text = r#"{ "factors": [{"kappa":1.0,"theta":0.16,"sigma":0.25,"rho":0.0,"v0":0.16,"lambda":0.1}], "deterministic_factors": [] }"#;
        let m = ModelParams::from_json_reader(text.as_bytes()).unwrap();
        assert_eq!(m.factors.len(), 1);
        assert_eq!(m.factors[0].lambda, 0.1);
    }

    #[test]
    fn contracts_validate_ordering() {
        let c = CsoContract {
            expiry: 0.5,
            t1: 0.25,
            t2: 0.75,
            strike: 0.0,
            kind: OptionKind::Call,
            rate: 0.0,
        };
        assert!(c.validate().is_err());
        let v = VanillaContract {
            expiry: 1.0,
            futures_maturity: 1.0,
            strike: 100.0,
            kind: OptionKind::Put,
            rate: 0.01,
        };
        assert!(v.validate().is_ok());
    }

    #[test]
    fn default_numerics_are_valid() {
        NumericsConfig::default().validate().unwrap();
    }
}
