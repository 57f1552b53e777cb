//! Monte Carlo simulation of the factor model, used as an independent oracle
//! for the transform pricers.
//!
//! Variance factors follow a full-truncation Euler scheme. Futures prices use
//! a log-Euler step with the variance frozen over the step and the Samuelson
//! damping averaged over it, so each step is exactly lognormal and the
//! discrete price is a martingale. Deterministic factors are stepped exactly.
//!
//! Every antithetic pair draws from its own ChaCha stream keyed by
//! `(seed, pair index)`, so results do not depend on the thread count.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    CsoContract, FuturesCurve, ModelParams, NumericsConfig, OptionKind, VanillaContract,
};
use crate::pricers::{Method, PriceResult};

/// Minimum number of steps per unit of simulated time.
pub const MIN_STEPS_PER_YEAR: f64 = 50.0;

/// Discretisation of the futures dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Exactly lognormal step given the frozen variance.
    #[default]
    LogEuler,
    /// Plain Euler on the price itself; prices can turn negative.
    Euler,
}

/// Run settings for the pricing entry points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McSettings {
    pub paths: usize,
    pub steps_per_year: usize,
    pub seed: u64,
    pub scheme: Scheme,
    pub antithetic: bool,
}

impl Default for McSettings {
    fn default() -> Self {
        Self::from_config(&NumericsConfig::default())
    }
}

impl McSettings {
    pub fn from_config(cfg: &NumericsConfig) -> Self {
        Self {
            paths: cfg.mc_paths,
            steps_per_year: cfg.mc_steps_per_year,
            seed: cfg.mc_seed,
            scheme: Scheme::LogEuler,
            antithetic: true,
        }
    }

    pub fn with_paths(mut self, paths: usize) -> Self {
        self.paths = paths;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_steps_per_year(mut self, steps_per_year: usize) -> Self {
        self.steps_per_year = steps_per_year;
        self
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_antithetic(mut self, antithetic: bool) -> Self {
        self.antithetic = antithetic;
        self
    }

    /// Number of steps used to reach `horizon`.
    pub fn steps_for(&self, horizon: f64) -> usize {
        default_steps(horizon, self.steps_per_year)
    }
}

/// `max(ceil(steps_per_year T), ceil(50 T), 1)`.
pub fn default_steps(horizon: f64, steps_per_year: usize) -> usize {
    let a = (steps_per_year as f64 * horizon).ceil();
    let b = (MIN_STEPS_PER_YEAR * horizon - 1e-9).ceil();
    a.max(b).max(1.0) as usize
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

/// Per-step coefficients shared by all paths.
#[derive(Debug, Clone)]
struct StepTable {
    /// `[step][factor][maturity]` step-averaged damping.
    damping: Vec<f64>,
    /// `[step][det factor][maturity]` damping at the step end.
    det_damping: Vec<f64>,
    /// Exact variance of `int exp(-lambda (t_end - s)) dW` over one substep, per deterministic factor.
    det_var: Vec<f64>,
}

/// Simulation engine for one model, set of maturities and time grid.
#[derive(Debug, Clone)]
pub struct Simulator {
    model: ModelParams,
    maturities: Vec<f64>,
    horizon: f64,
    steps: usize,
    substeps: usize,
    scheme: Scheme,
    antithetic: bool,
    table: StepTable,
}

struct Workspace {
    v: Vec<f64>,
    x: Vec<f64>,
    vplus: Vec<f64>,
    zb: Vec<f64>,
    zv: Vec<f64>,
    rel: Vec<f64>,
}

impl Simulator {
    /// Log-Euler, antithetic, one normal per driver and step.
    pub fn new(model: &ModelParams, maturities: &[f64], horizon: f64, steps: usize) -> Result<Self> {
        check_model(model)?;
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid(format!("horizon {horizon} must be positive")));
        }
        if let Some(&m) = maturities.iter().find(|&&m| !(m >= horizon && m.is_finite())) {
            return Err(Error::invalid(format!("maturity {m} precedes the horizon {horizon}")));
        }
        if (steps as f64) < MIN_STEPS_PER_YEAR * horizon - 1e-9 {
            return Err(Error::invalid(format!(
                "{steps} steps is too coarse for horizon {horizon}; need at least {}",
                default_steps(horizon, 0)
            )));
        }
        let mut sim = Self {
            model: model.clone(),
            maturities: maturities.to_vec(),
            horizon,
            steps,
            substeps: 1,
            scheme: Scheme::LogEuler,
            antithetic: true,
            table: StepTable {
                damping: Vec::new(),
                det_damping: Vec::new(),
                det_var: Vec::new(),
            },
        };
        sim.build_table();
        Ok(sim)
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_antithetic(mut self, antithetic: bool) -> Self {
        self.antithetic = antithetic;
        self
    }

    /// Draw `substeps` normals per driver and step and use their scaled sum.
    /// A run with `steps` steps and two substeps sees exactly the Brownian
    /// increments of a run with `2 steps` steps and one substep, which gives
    /// coupled coarse and fine paths.
    pub fn with_substeps(mut self, substeps: usize) -> Self {
        self.substeps = substeps.max(1);
        self.build_table();
        self
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time_grid(&self) -> Vec<f64> {
        let dt = self.dt();
        (0..=self.steps).map(|i| if i == self.steps { self.horizon } else { i as f64 * dt }).collect()
    }

    fn build_table(&mut self) {
        let dt = self.dt();
        let h = dt / self.substeps as f64;
        let nm = self.maturities.len();
        let mut damping = Vec::with_capacity(self.steps * self.model.factors.len() * nm);
        let mut det_damping = Vec::new();
        for i in 0..self.steps {
            let t_end = (i + 1) as f64 * dt;
            for f in &self.model.factors {
                let avg = step_average(f.lambda, dt);
                for &tm in &self.maturities {
                    damping.push((-f.lambda * (tm - t_end)).exp() * avg);
                }
            }
            for k in 0..self.substeps {
                let tau = i as f64 * dt + (k + 1) as f64 * h;
                for d in &self.model.deterministic_factors {
                    for &tm in &self.maturities {
                        det_damping.push(d.sigma_hat * (-d.lambda * (tm - tau)).exp());
                    }
                }
            }
        }
        let det_var = self
            .model
            .deterministic_factors
            .iter()
            .map(|d| {
                let x = 2.0 * d.lambda * h;
                if x.abs() < 1e-12 { h } else { -(-x).exp_m1() / (2.0 * d.lambda) }
            })
            .collect();
        self.table = StepTable {
            damping,
            det_damping,
            det_var,
        };
    }

    fn workspace(&self) -> Workspace {
        let n = self.model.factors.len();
        Workspace {
            v: vec![0.0; n],
            x: vec![0.0; self.maturities.len()],
            vplus: vec![0.0; n],
            zb: vec![0.0; n],
            zv: vec![0.0; n],
            rel: vec![0.0; self.maturities.len()],
        }
    }

    fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        rng
    }

    /// Runs one path. `observe(i, v_plus, x)` is called at every grid point,
    /// `x` holding log-returns (log-Euler) or relative prices (Euler).
    fn run_path(
        &self,
        ws: &mut Workspace,
        rng: &mut ChaCha8Rng,
        sign: f64,
        mut observe: impl FnMut(usize, &[f64], &[f64]),
    ) {
        let factors = &self.model.factors;
        let nf = factors.len();
        let nd = self.model.deterministic_factors.len();
        let nm = self.maturities.len();
        let dt = self.dt();
        let s = self.substeps;
        let sqrt_h = (dt / s as f64).sqrt();
        let log = self.scheme == Scheme::LogEuler;

        for (v, f) in ws.v.iter_mut().zip(factors) {
            *v = f.v0;
        }
        ws.vplus.copy_from_slice(&ws.v);
        let start = if log { 0.0 } else { 1.0 };
        ws.x.iter_mut().for_each(|x| *x = start);
        observe(0, &ws.vplus, &ws.x);

        for i in 0..self.steps {
            ws.zb.iter_mut().for_each(|z| *z = 0.0);
            ws.zv.iter_mut().for_each(|z| *z = 0.0);
            ws.rel.iter_mut().for_each(|z| *z = 0.0);
            for k in 0..s {
                for j in 0..nf {
                    let b: f64 = StandardNormal.sample(rng);
                    let z: f64 = StandardNormal.sample(rng);
                    ws.zb[j] += b;
                    ws.zv[j] += z;
                }
                let row = &self.table.det_damping[(i * s + k) * nd * nm..];
                for d in 0..nd {
                    let z: f64 = StandardNormal.sample(rng);
                    let var = self.table.det_var[d];
                    let dw = sign * z * var.sqrt();
                    for m in 0..nm {
                        let c = row[d * nm + m];
                        ws.rel[m] += c * dw;
                        if log {
                            ws.x[m] -= 0.5 * c * c * var;
                        }
                    }
                }
            }
            let row = &self.table.damping[i * nf * nm..];
            for (j, f) in factors.iter().enumerate() {
                let vp = ws.vplus[j];
                let sv = vp.sqrt();
                let db = sign * ws.zb[j] * sqrt_h;
                let dz = sign * ws.zv[j] * sqrt_h;
                for m in 0..nm {
                    let c = row[j * nm + m];
                    ws.rel[m] += c * sv * db;
                    if log {
                        ws.x[m] -= 0.5 * c * c * vp * dt;
                    }
                }
                let dw = f.rho * db + (1.0 - f.rho * f.rho).sqrt() * dz;
                ws.v[j] += f.kappa * (f.theta - vp) * dt + f.sigma * sv * dw;
                ws.vplus[j] = ws.v[j].max(0.0);
            }
            for m in 0..nm {
                if log {
                    ws.x[m] += ws.rel[m];
                } else {
                    ws.x[m] *= 1.0 + ws.rel[m];
                }
            }
            observe(i + 1, &ws.vplus, &ws.x);
        }
    }
}

/// `(1 - exp(-lambda dt)) / (lambda dt)`: the mean of `exp(-lambda (t_end - s))` over the step.
fn step_average(lambda: f64, dt: f64) -> f64 {
    let x = lambda * dt;
    if x.abs() < 1e-10 { 1.0 - 0.5 * x } else { -(-x).exp_m1() / x }
}

/// The simulator accepts degenerate factors (zero vol-of-vol, zero variance)
/// that the transform pricers reject.
fn check_model(model: &ModelParams) -> Result<()> {
    if model.n_factors() == 0 {
        return Err(Error::invalid("model has no factors"));
    }
    for (j, f) in model.factors.iter().enumerate() {
        let checks = [
            ("kappa", f.kappa, f.kappa >= 0.0),
            ("theta", f.theta, f.theta >= 0.0),
            ("sigma", f.sigma, f.sigma >= 0.0),
            ("v0", f.v0, f.v0 >= 0.0),
            ("lambda", f.lambda, f.lambda >= 0.0),
            ("rho", f.rho, f.rho.abs() <= 1.0),
        ];
        for (name, value, ok) in checks {
            if !ok || !value.is_finite() {
                return Err(Error::invalid(format!("factor {j}: {name} = {value} out of range")));
            }
        }
    }
    for (j, d) in model.deterministic_factors.iter().enumerate() {
        if !(d.sigma_hat >= 0.0 && d.lambda >= 0.0 && d.sigma_hat.is_finite() && d.lambda.is_finite()) {
            return Err(Error::invalid(format!("deterministic factor {j} out of range")));
        }
    }
    Ok(())
}

/// Simulated paths on a uniform grid, kept in memory; meant for inspection
/// and modest path counts. Pricing streams terminal values instead.
#[derive(Debug, Clone)]
pub struct PathBundle {
    pub times: Vec<f64>,
    pub maturities: Vec<f64>,
    pub n_factors: usize,
    pub paths: usize,
    pub seed: u64,
    pub antithetic: bool,
    pub scheme: Scheme,
    variance: Vec<f64>,
    log_returns: Vec<f64>,
}

impl PathBundle {
    fn points(&self) -> usize {
        self.times.len()
    }

    /// Truncated variance `v_j(t)^+` of one factor along one path.
    pub fn variance(&self, path: usize, factor: usize) -> &[f64] {
        let n = self.points();
        let at = (path * self.n_factors + factor) * n;
        &self.variance[at..at + n]
    }

    /// `ln(F(t, T_m) / F(0, T_m))` along one path. Under the plain Euler
    /// scheme a non-positive price shows up as NaN.
    pub fn log_return(&self, path: usize, maturity: usize) -> &[f64] {
        let n = self.points();
        let at = (path * self.maturities.len() + maturity) * n;
        &self.log_returns[at..at + n]
    }

    /// Random stream that produced `path`; antithetic partners share one.
    pub fn stream(&self, path: usize) -> u64 {
        if self.antithetic { (path / 2) as u64 } else { path as u64 }
    }

    /// `+1` for the primary path of a stream, `-1` for its antithetic partner.
    pub fn sign(&self, path: usize) -> f64 {
        if self.antithetic && path % 2 == 1 { -1.0 } else { 1.0 }
    }
}

/// Terminal state of every path: relative prices `F(T, T_m) / F(0, T_m)` and
/// truncated variances, grouped by antithetic pair.
#[derive(Debug, Clone)]
pub struct TerminalSamples {
    pub maturities: Vec<f64>,
    pub n_factors: usize,
    /// Paths per random stream (2 with antithetics).
    pub group: usize,
    relative: Vec<f64>,
    variance: Vec<f64>,
}

impl TerminalSamples {
    pub fn len(&self) -> usize {
        if self.maturities.is_empty() {
            self.variance.len() / self.n_factors.max(1)
        } else {
            self.relative.len() / self.maturities.len()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn relative(&self, path: usize) -> &[f64] {
        let m = self.maturities.len();
        &self.relative[path * m..(path + 1) * m]
    }

    pub fn variance(&self, path: usize) -> &[f64] {
        let n = self.n_factors;
        &self.variance[path * n..(path + 1) * n]
    }

    /// Mean of `f(relative prices, variances)` over all paths; the standard
    /// error treats each antithetic pair as one observation.
    pub fn estimate(&self, f: impl Fn(&[f64], &[f64]) -> f64) -> Estimate {
        let groups = self.len() / self.group;
        let means = (0..groups).map(|g| {
            let s: f64 = (0..self.group)
                .map(|k| {
                    let p = g * self.group + k;
                    f(self.relative(p), self.variance(p))
                })
                .sum();
            s / self.group as f64
        });
        estimate_from(means, groups)
    }

    /// Estimate of `E[f(self) - f(other)]` path by path; both sample sets must
    /// come from the same streams.
    pub fn paired_difference(&self, other: &TerminalSamples, f: impl Fn(&[f64], &[f64]) -> f64) -> Result<Estimate> {
        if self.len() != other.len() || self.group != other.group {
            return Err(Error::invalid("sample sets have different layouts"));
        }
        let groups = self.len() / self.group;
        let means = (0..groups).map(|g| {
            let s: f64 = (0..self.group)
                .map(|k| {
                    let p = g * self.group + k;
                    f(self.relative(p), self.variance(p)) - f(other.relative(p), other.variance(p))
                })
                .sum();
            s / self.group as f64
        });
        Ok(estimate_from(means, groups))
    }
}

/// Sequential mean and standard error; the order is fixed for reproducibility.
fn estimate_from(values: impl Iterator<Item = f64>, n: usize) -> Estimate {
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, x) in values.enumerate() {
        let d = x - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (x - mean);
    }
    let stderr = if n > 1 { (m2 / (n - 1) as f64 / n as f64).sqrt() } else { f64::NAN };
    Estimate { mean, stderr }
}

impl Simulator {
    fn group(&self) -> usize {
        if self.antithetic { 2 } else { 1 }
    }

    /// Number of random streams needed for at least `paths` paths.
    fn groups_for(&self, paths: usize) -> Result<usize> {
        let g = paths.div_ceil(self.group());
        if g < 2 {
            return Err(Error::invalid(format!(
                "need at least {} paths for a standard error",
                2 * self.group()
            )));
        }
        Ok(g)
    }

    fn run_group(&self, ws: &mut Workspace, seed: u64, stream: u64, mut observe: impl FnMut(usize, usize, &[f64], &[f64])) {
        for k in 0..self.group() {
            let sign = if k == 0 { 1.0 } else { -1.0 };
            let mut rng = Self::rng(seed, stream);
            self.run_path(ws, &mut rng, sign, |i, v, x| observe(k, i, v, x));
        }
    }

    /// Full paths. Memory grows with `paths * steps`.
    pub fn paths(&self, paths: usize, seed: u64) -> Result<PathBundle> {
        let groups = self.groups_for(paths)?;
        let g = self.group();
        let n = self.steps + 1;
        let nf = self.model.factors.len();
        let nm = self.maturities.len();
        let mut variance = vec![0.0; groups * g * nf * n];
        let mut log_returns = vec![0.0; groups * g * nm * n];
        let log = self.scheme == Scheme::LogEuler;
        variance
            .par_chunks_mut((g * nf * n).max(1))
            .zip(log_returns.par_chunks_mut((g * nm * n).max(1)))
            .enumerate()
            .for_each_init(
                || self.workspace(),
                |ws, (stream, (vc, xc))| {
                    self.run_group(ws, seed, stream as u64, |k, i, v, x| {
                        for (j, &vj) in v.iter().enumerate() {
                            vc[(k * nf + j) * n + i] = vj;
                        }
                        for (m, &xm) in x.iter().enumerate() {
                            xc[(k * nm + m) * n + i] = if log { xm } else { xm.ln() };
                        }
                    })
                },
            );
        if nf == 0 {
            variance.clear();
        }
        if nm == 0 {
            log_returns.clear();
        }
        Ok(PathBundle {
            times: self.time_grid(),
            maturities: self.maturities.clone(),
            n_factors: nf,
            paths: groups * g,
            seed,
            antithetic: self.antithetic,
            scheme: self.scheme,
            variance,
            log_returns,
        })
    }

    /// Terminal relative prices and variances only.
    pub fn terminal(&self, paths: usize, seed: u64) -> Result<TerminalSamples> {
        let groups = self.groups_for(paths)?;
        let g = self.group();
        let nf = self.model.factors.len();
        let nm = self.maturities.len();
        let mut relative = vec![0.0; groups * g * nm];
        let mut variance = vec![0.0; groups * g * nf];
        let last = self.steps;
        let log = self.scheme == Scheme::LogEuler;
        // zip needs non-empty chunks on both sides, so pad empty layouts
        let (rw, vw) = ((g * nm).max(1), (g * nf).max(1));
        let mut pad_r = vec![0.0; if nm == 0 { groups } else { 0 }];
        let mut pad_v = vec![0.0; if nf == 0 { groups } else { 0 }];
        let rel_buf: &mut [f64] = if nm == 0 { &mut pad_r } else { &mut relative };
        let var_buf: &mut [f64] = if nf == 0 { &mut pad_v } else { &mut variance };
        rel_buf
            .par_chunks_mut(rw)
            .zip(var_buf.par_chunks_mut(vw))
            .enumerate()
            .for_each_init(
                || self.workspace(),
                |ws, (stream, (rc, vc))| {
                    self.run_group(ws, seed, stream as u64, |k, i, v, x| {
                        if i != last {
                            return;
                        }
                        for (m, &xm) in x.iter().enumerate() {
                            rc[k * nm + m] = if log { xm.exp() } else { xm };
                        }
                        for (j, &vj) in v.iter().enumerate() {
                            vc[k * nf + j] = vj;
                        }
                    })
                },
            );
        Ok(TerminalSamples {
            maturities: self.maturities.clone(),
            n_factors: nf,
            group: g,
            relative,
            variance,
        })
    }
}

/// Simulates `paths` log-Euler paths (antithetic pairs) for the given
/// futures maturities on `steps` uniform steps to `horizon`.
pub fn simulate(
    model: &ModelParams,
    maturities: &[f64],
    horizon: f64,
    steps: usize,
    paths: usize,
    seed: u64,
) -> Result<PathBundle> {
    Simulator::new(model, maturities, horizon, steps)?.paths(paths, seed)
}

/// Option on `sum_m w_m F(T, T_m) - K`.
struct LinearPayoff {
    weights: Vec<f64>,
    strike: f64,
    kind: OptionKind,
    discount: f64,
}

impl LinearPayoff {
    fn underlying(&self, rel: &[f64]) -> f64 {
        self.weights.iter().zip(rel).map(|(w, r)| w * r).sum()
    }

    fn price(&self, samples: &TerminalSamples, method: Method, paths: usize, steps: usize) -> PriceResult {
        let d = self.discount;
        let k = self.strike;
        let call = samples.estimate(|r, _| d * (self.underlying(r) - k).max(0.0));
        let put = samples.estimate(|r, _| d * (k - self.underlying(r)).max(0.0));
        let fwd = samples.estimate(|r, _| self.underlying(r));
        let main = match self.kind {
            OptionKind::Call => call,
            OptionKind::Put => put,
        };
        let mut out = PriceResult::new(main.mean, method)
            .with("call", call.mean)
            .with("call_stderr", call.stderr)
            .with("put", put.mean)
            .with("put_stderr", put.stderr)
            .with("mc_forward", fwd.mean)
            .with("mc_forward_stderr", fwd.stderr)
            .with("paths", paths as f64)
            .with("steps", steps as f64);
        out.stderr = Some(main.stderr);
        out
    }

    fn payoff(&self, rel: &[f64]) -> f64 {
        let x = self.underlying(rel) - self.strike;
        self.discount
            * match self.kind {
                OptionKind::Call => x.max(0.0),
                OptionKind::Put => (-x).max(0.0),
            }
    }
}

fn settings_simulator(model: &ModelParams, maturities: &[f64], horizon: f64, steps: usize, s: &McSettings) -> Result<Simulator> {
    Ok(Simulator::new(model, maturities, horizon, steps)?
        .with_scheme(s.scheme)
        .with_antithetic(s.antithetic))
}

fn vanilla_setup(curve: &FuturesCurve, c: &VanillaContract) -> Result<LinearPayoff> {
    c.validate()?;
    Ok(LinearPayoff {
        weights: vec![curve.price(c.futures_maturity)],
        strike: c.strike,
        kind: c.kind,
        discount: (-c.rate * c.expiry).exp(),
    })
}

fn cso_setup(curve: &FuturesCurve, c: &CsoContract) -> Result<LinearPayoff> {
    c.validate()?;
    Ok(LinearPayoff {
        weights: vec![curve.price(c.t1), -curve.price(c.t2)],
        strike: c.strike,
        kind: c.kind,
        discount: c.discount(),
    })
}

/// Discounted payoff mean of a vanilla option, with its standard error.
pub fn mc_price_vanilla(
    model: &ModelParams,
    curve: &FuturesCurve,
    contract: &VanillaContract,
    settings: &McSettings,
) -> Result<PriceResult> {
    let payoff = vanilla_setup(curve, contract)?;
    let steps = settings.steps_for(contract.expiry);
    let sim = settings_simulator(model, &[contract.futures_maturity], contract.expiry, steps, settings)?;
    let samples = sim.terminal(settings.paths, settings.seed)?;
    Ok(payoff.price(&samples, Method::MonteCarlo, samples.len(), steps))
}

/// Calendar spread option priced on shared factor paths. The call and put
/// come from the same paths, so `call - put` equals the discounted simulated
/// forward spread minus the discounted strike.
pub fn mc_price_cso(
    model: &ModelParams,
    curve: &FuturesCurve,
    cso: &CsoContract,
    settings: &McSettings,
) -> Result<PriceResult> {
    let payoff = cso_setup(curve, cso)?;
    let steps = settings.steps_for(cso.expiry);
    let sim = settings_simulator(model, &[cso.t1, cso.t2], cso.expiry, steps, settings)?;
    let samples = sim.terminal(settings.paths, settings.seed)?;
    Ok(payoff.price(&samples, Method::MonteCarlo, samples.len(), steps))
}

/// Prices on a grid and on the grid with half the step, driven by the same
/// Brownian increments.
#[derive(Debug, Clone)]
pub struct StepHalving {
    pub coarse: PriceResult,
    pub fine: PriceResult,
    /// `fine - coarse`, path by path.
    pub difference: Estimate,
}

impl StepHalving {
    /// Halving the step moved the price by less than one standard error.
    pub fn passes(&self) -> bool {
        let se = self.fine.stderr.unwrap_or(0.0);
        self.difference.mean.abs() < se
    }
}

fn step_halving(
    model: &ModelParams,
    maturities: &[f64],
    horizon: f64,
    payoff: &LinearPayoff,
    settings: &McSettings,
) -> Result<StepHalving> {
    let steps = settings.steps_for(horizon);
    let coarse_sim = settings_simulator(model, maturities, horizon, steps, settings)?.with_substeps(2);
    let fine_sim = settings_simulator(model, maturities, horizon, 2 * steps, settings)?;
    let coarse_s = coarse_sim.terminal(settings.paths, settings.seed)?;
    let fine_s = fine_sim.terminal(settings.paths, settings.seed)?;
    let difference = fine_s.paired_difference(&coarse_s, |r, _| payoff.payoff(r))?;
    Ok(StepHalving {
        coarse: payoff.price(&coarse_s, Method::MonteCarlo, coarse_s.len(), steps),
        fine: payoff.price(&fine_s, Method::MonteCarlo, fine_s.len(), 2 * steps),
        difference,
    })
}

pub fn step_halving_vanilla(
    model: &ModelParams,
    curve: &FuturesCurve,
    contract: &VanillaContract,
    settings: &McSettings,
) -> Result<StepHalving> {
    let payoff = vanilla_setup(curve, contract)?;
    step_halving(model, &[contract.futures_maturity], contract.expiry, &payoff, settings)
}

pub fn step_halving_cso(
    model: &ModelParams,
    curve: &FuturesCurve,
    cso: &CsoContract,
    settings: &McSettings,
) -> Result<StepHalving> {
    let payoff = cso_setup(curve, cso)?;
    step_halving(model, &[cso.t1, cso.t2], cso.expiry, &payoff, settings)
}

/// Instantaneous correlation at time `t` between the returns of the `t1` and
/// `t2` contracts given the current variances `v`. One-factor models give
/// exactly one. NaN when both legs have zero instantaneous variance.
pub fn instantaneous_correlation(model: &ModelParams, v: &[f64], t: f64, t1: f64, t2: f64) -> f64 {
    if model.n_factors() == 1 {
        return 1.0;
    }
    let (mut v11, mut v12, mut v22) = (0.0, 0.0, 0.0);
    let mut add = |w: f64, lambda: f64| {
        let a = (-lambda * (t1 - t)).exp();
        let b = (-lambda * (t2 - t)).exp();
        v11 += a * a * w;
        v12 += a * b * w;
        v22 += b * b * w;
    };
    for (f, &vj) in model.factors.iter().zip(v) {
        add(vj.max(0.0), f.lambda);
    }
    for d in &model.deterministic_factors {
        add(d.sigma_hat * d.sigma_hat, d.lambda);
    }
    let den = (v11 * v22).sqrt();
    if den > 0.0 { (v12 / den).clamp(-1.0, 1.0) } else { f64::NAN }
}

/// Empirical probabilities over uniform bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl Histogram {
    /// Uniform bins over the sample range. A degenerate range gets a tiny
    /// symmetric window so every sample lands in the middle bin.
    pub fn from_samples(samples: &[f64], bins: usize) -> Result<Self> {
        if bins == 0 || samples.is_empty() {
            return Err(Error::invalid("histogram needs samples and at least one bin"));
        }
        let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if hi > lo {
            (lo, hi)
        } else {
            let w = 1e-9 * lo.abs().max(1.0);
            (lo - w, hi + w)
        };
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { hi } else { lo + i as f64 * width }).collect();
        let mut counts = vec![0usize; bins];
        for &x in samples {
            let i = (((x - lo) / width) as usize).min(bins - 1);
            counts[i] += 1;
        }
        let n = samples.len() as f64;
        Ok(Self {
            edges,
            probabilities: counts.into_iter().map(|c| c as f64 / n).collect(),
        })
    }

    pub fn to_csv_writer(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["bin_left", "bin_right", "probability"])?;
        for (i, p) in self.probabilities.iter().enumerate() {
            wr.write_record([self.edges[i].to_string(), self.edges[i + 1].to_string(), p.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Outcome of sampling the instantaneous correlation.
#[derive(Debug, Clone)]
pub struct CorrelationStudy {
    /// One value per path, in path order; degenerate paths are left out.
    pub samples: Vec<f64>,
    pub mean: Estimate,
    pub histogram: Histogram,
    /// Paths where both legs had zero instantaneous variance.
    pub degenerate: usize,
}

/// Default number of histogram bins.
pub const HISTOGRAM_BINS: usize = 100;

/// Simulates the variance factors to `t` and evaluates the instantaneous
/// correlation of the `t1` and `t2` contracts on every path.
pub fn instantaneous_correlation_study(
    model: &ModelParams,
    t: f64,
    t1: f64,
    t2: f64,
    settings: &McSettings,
) -> Result<CorrelationStudy> {
    if !(t > 0.0 && t <= t1 && t1 <= t2 && t2.is_finite()) {
        return Err(Error::invalid(format!("need 0 < t <= T1 <= T2, got t = {t}, T1 = {t1}, T2 = {t2}")));
    }
    let steps = settings.steps_for(t);
    let sim = settings_simulator(model, &[], t, steps, settings)?;
    let terminal = sim.terminal(settings.paths, settings.seed)?;
    let all: Vec<f64> = (0..terminal.len())
        .map(|p| instantaneous_correlation(model, terminal.variance(p), t, t1, t2))
        .collect();
    let samples: Vec<f64> = all.iter().copied().filter(|x| x.is_finite()).collect();
    let degenerate = all.len() - samples.len();
    let mean = if degenerate == 0 {
        terminal.estimate(|_, v| instantaneous_correlation(model, v, t, t1, t2))
    } else {
        estimate_from(samples.iter().copied(), samples.len())
    };
    let histogram = Histogram::from_samples(&samples, HISTOGRAM_BINS)?;
    Ok(CorrelationStudy {
        samples,
        mean,
        histogram,
        degenerate,
    })
}
