//! Dependence between the two legs of a calendar spread: the model copula
//! recovered from the joint characteristic function, scalar dependence
//! measures, calendar spreads under a Gaussian copula with the model's own
//! marginals, the Frechet bounds, and implied correlation.

use std::f64::consts::PI;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::charfn::CFContext;
use crate::error::{Error, Result};
use crate::model::{CsoContract, NumericsConfig, OptionKind};
use crate::pricers::{norm_cdf, Method, PriceResult};
use crate::transforms::{
    default_grid, gauss_legendre, joint_cdf_spectrum, joint_pdf_spectrum, linspace, marginal_cdf,
    marginal_pdf_spectrum, GridFunction1D, Lattice, Leg,
};

/// Marginal densities below this make the copula density ratio unreliable.
const DENSITY_MASK: f64 = 1e-12;
const DENSITY_FLOOR: f64 = -1e-4;
/// Largest share of masked density cells `dependence_measures` accepts.
const MAX_MASKED: f64 = 0.01;
/// Correlation bracket for the implied-correlation search.
const RHO_EDGE: f64 = 1e-6;
/// Nodes of the quantile-space quadrature for the Frechet bounds.
const FRECHET_NODES: usize = 10_000;
const FRECHET_Z: f64 = 8.5;

// ---------------------------------------------------------------------------
// Bivariate normal

/// `P(X < x, Y < y)` for standard normals with correlation `rho`, by Genz's
/// refinement of the Drezner-Wesolowsky method (absolute error ~1e-15).
pub fn bvn_cdf(x: f64, y: f64, rho: f64) -> f64 {
    bvn_upper(-x, -y, rho)
}

/// `P(X > h, Y > k)`.
fn bvn_upper(h: f64, k: f64, r: f64) -> f64 {
    if h == f64::INFINITY || k == f64::INFINITY {
        return 0.0;
    }
    if h == f64::NEG_INFINITY {
        return if k == f64::NEG_INFINITY { 1.0 } else { norm_cdf(-k) };
    }
    if k == f64::NEG_INFINITY {
        return norm_cdf(-h);
    }
    if r == 0.0 {
        return norm_cdf(-h) * norm_cdf(-k);
    }
    let (w, x): (&[f64], &[f64]) = if r.abs() < 0.3 {
        (&GL6_W, &GL6_X)
    } else if r.abs() < 0.75 {
        (&GL12_W, &GL12_X)
    } else {
        (&GL20_W, &GL20_X)
    };
    // Nodes on (0, 2): 1 - x and 1 + x share the weight.
    let nodes = || x.iter().zip(w).flat_map(|(x, w)| [(1.0 - x, *w), (1.0 + x, *w)]);
    let tp = 2.0 * PI;
    let hk = h * k;
    let bvn = if r.abs() < 0.925 {
        let hs = 0.5 * (h * h + k * k);
        let asr = 0.5 * r.asin();
        let s: f64 = nodes()
            .map(|(x, w)| {
                let sn = (asr * x).sin();
                w * ((sn * hk - hs) / (1.0 - sn * sn)).exp()
            })
            .sum();
        s * asr / tp + norm_cdf(-h) * norm_cdf(-k)
    } else {
        let (k, hk) = if r < 0.0 { (-k, -hk) } else { (k, hk) };
        let mut bvn = 0.0;
        if r.abs() < 1.0 {
            let as_ = 1.0 - r * r;
            let mut a = as_.sqrt();
            let bs = (h - k) * (h - k);
            let c = (4.0 - hk) / 8.0;
            let d = (12.0 - hk) / 80.0;
            let asr = -0.5 * (bs / as_ + hk);
            if asr > -100.0 {
                bvn = a * asr.exp() * (1.0 - c * (bs - as_) * (1.0 - d * bs) / 3.0 + c * d * as_ * as_);
            }
            if hk > -100.0 {
                let b = bs.sqrt();
                let sp = tp.sqrt() * norm_cdf(-b / a);
                bvn -= (-0.5 * hk).exp() * sp * b * (1.0 - c * bs * (1.0 - d * bs) / 3.0);
            }
            a *= 0.5;
            let s: f64 = nodes()
                .filter_map(|(x, w)| {
                    let xs = (a * x) * (a * x);
                    let asr = -0.5 * (bs / xs + hk);
                    if asr <= -100.0 {
                        return None;
                    }
                    let sp = 1.0 + c * xs * (1.0 + 5.0 * d * xs);
                    let rs = (1.0 - xs).sqrt();
                    let ep = (-0.5 * hk * xs / ((1.0 + rs) * (1.0 + rs))).exp() / rs;
                    Some(w * asr.exp() * (sp - ep))
                })
                .sum();
            bvn = (a * s - bvn) / tp;
        }
        if r > 0.0 {
            bvn + norm_cdf(-h.max(k))
        } else if h >= k {
            -bvn
        } else {
            let l = if h < 0.0 { norm_cdf(k) - norm_cdf(h) } else { norm_cdf(-h) - norm_cdf(-k) };
            l - bvn
        }
    };
    bvn.clamp(0.0, 1.0)
}

const GL6_W: [f64; 3] = [0.171_324_492_379_170_5, 0.360_761_573_048_138_4, 0.467_913_934_572_690_4];
const GL6_X: [f64; 3] = [0.932_469_514_203_152_2, 0.661_209_386_466_264_7, 0.238_619_186_083_197];
const GL12_W: [f64; 6] = [
    0.047_175_336_386_511_77,
    0.106_939_325_995_318_3,
    0.160_078_328_543_346_4,
    0.203_167_426_723_065_9,
    0.233_492_536_538_354_7,
    0.249_147_045_813_402_9,
];
const GL12_X: [f64; 6] = [
    0.981_560_634_246_719_1,
    0.904_117_256_370_475,
    0.769_902_674_194_305,
    0.587_317_954_286_617_1,
    0.367_831_498_998_180_2,
    0.125_233_408_511_469_2,
];
const GL20_W: [f64; 10] = [
    0.017_614_007_139_152_12,
    0.040_601_429_800_386_94,
    0.062_672_048_334_109_06,
    0.083_276_741_576_704_75,
    0.101_930_119_817_240_4,
    0.118_194_531_961_518_4,
    0.131_688_638_449_176_6,
    0.142_096_109_318_382_1,
    0.149_172_986_472_603_7,
    0.152_753_387_130_725_9,
];
const GL20_X: [f64; 10] = [
    0.993_128_599_185_094_9,
    0.963_971_927_277_913_8,
    0.912_234_428_251_325_9,
    0.839_116_971_822_218_8,
    0.746_331_906_460_150_8,
    0.636_053_680_726_515,
    0.510_867_001_950_827_1,
    0.373_706_088_715_419_6,
    0.227_785_851_141_645_1,
    0.076_526_521_133_497_33,
];

/// Standard normal quantile, polished by one Newton step on `norm_cdf`.
pub fn norm_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let z = Normal::standard().inverse_cdf(p);
    let dens = (-0.5 * z * z).exp() / (2.0 * PI).sqrt();
    if dens > 1e-300 {
        z - (norm_cdf(z) - p) / dens
    } else {
        z
    }
}

/// Gaussian copula `C(u, v) = Phi2(Phi^-1(u), Phi^-1(v); rho)`.
pub fn gaussian_copula(u: f64, v: f64, rho: f64) -> f64 {
    if u <= 0.0 || v <= 0.0 {
        return 0.0;
    }
    if u >= 1.0 {
        return v.min(1.0);
    }
    if v >= 1.0 {
        return u;
    }
    bvn_cdf(norm_quantile(u), norm_quantile(v), rho)
}

// ---------------------------------------------------------------------------
// Copula grids

#[derive(Debug, Clone)]
pub struct CopulaSpec {
    /// Interior points per axis.
    pub n: usize,
    /// Smallest interior `v`; the interior runs over `[v_min, 1 - v_min]`.
    pub v_min: f64,
    pub density: bool,
    /// Points of the marginal CDF grids that are inverted for quantiles.
    pub marginal_points: usize,
    /// Lattice for the joint transforms; `None` uses the configured default.
    pub lattice: Option<Lattice>,
}

impl Default for CopulaSpec {
    fn default() -> Self {
        Self {
            n: 101,
            v_min: 0.005,
            density: true,
            marginal_points: 2001,
            lattice: None,
        }
    }
}

/// Copula and copula density on a tensor grid in `[0, 1]^2`. The boundary
/// rows and columns (`v = 0`, `v = 1`) come from the copula axioms; the
/// interior from the model.
#[derive(Debug, Clone)]
pub struct CopulaGrid {
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
    /// `C`, row-major over `v1`.
    pub c: Vec<f64>,
    /// Copula density, where known; boundary values copy the nearest
    /// interior cell.
    pub density: Option<Vec<f64>>,
    pub masked: Vec<bool>,
    pub masked_fraction: f64,
    /// Interior log-return quantiles `G_k^{-1}(v)` of each leg.
    pub q1: Vec<f64>,
    pub q2: Vec<f64>,
}

/// Interior `v` values plus the two boundary points.
fn v_axis(n: usize, v_min: f64) -> Vec<f64> {
    let mut v = vec![0.0];
    v.extend(linspace(v_min, 1.0 - v_min, n));
    v.push(1.0);
    v
}

impl CopulaGrid {
    /// Grid from a known copula (and optionally its density); used for
    /// reference copulas and tests.
    pub fn from_fn(
        n: usize,
        v_min: f64,
        c: impl Fn(f64, f64) -> f64,
        density: Option<&dyn Fn(f64, f64) -> f64>,
    ) -> Self {
        let v = v_axis(n, v_min);
        let m = v.len();
        let mut vals = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                vals[i * m + j] = boundary_value(v[i], v[j]).unwrap_or_else(|| c(v[i], v[j]));
            }
        }
        let density = density.map(|d| {
            let mut out = vec![0.0; m * m];
            for i in 0..m {
                for j in 0..m {
                    let (a, b) = (v[i.clamp(1, m - 2)], v[j.clamp(1, m - 2)]);
                    out[i * m + j] = d(a, b);
                }
            }
            out
        });
        Self {
            v1: v.clone(),
            v2: v,
            c: vals,
            density,
            masked: vec![false; m * m],
            masked_fraction: 0.0,
            q1: Vec::new(),
            q2: Vec::new(),
        }
    }

    pub fn independence(n: usize) -> Self {
        Self::from_fn(n, 0.005, |a, b| a * b, Some(&|_, _| 1.0))
    }

    pub fn comonotone(n: usize) -> Self {
        Self::from_fn(n, 0.005, f64::min, None)
    }

    pub fn gaussian(rho: f64, n: usize) -> Self {
        let dens = move |a: f64, b: f64| {
            let (x, y) = (norm_quantile(a), norm_quantile(b));
            let s = 1.0 - rho * rho;
            (-(rho * rho * (x * x + y * y) - 2.0 * rho * x * y) / (2.0 * s)).exp() / s.sqrt()
        };
        Self::from_fn(n, 0.005, |a, b| gaussian_copula(a, b, rho), Some(&dens))
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.c[i * self.v2.len() + j]
    }

    pub fn density_at(&self, i: usize, j: usize) -> Option<f64> {
        self.density.as_ref().map(|d| d[i * self.v2.len() + j])
    }

    /// Bilinear interpolation of `C`.
    pub fn eval(&self, a: f64, b: f64) -> f64 {
        let locate = |v: &[f64], t: f64| {
            let t = t.clamp(0.0, 1.0);
            let i = v.partition_point(|&x| x <= t).clamp(1, v.len() - 1) - 1;
            (i, (t - v[i]) / (v[i + 1] - v[i]))
        };
        let (i, s) = locate(&self.v1, a);
        let (j, t) = locate(&self.v2, b);
        (1.0 - s) * (1.0 - t) * self.at(i, j)
            + s * (1.0 - t) * self.at(i + 1, j)
            + (1.0 - s) * t * self.at(i, j + 1)
            + s * t * self.at(i + 1, j + 1)
    }

    /// Most negative rectangle measure `C(b1,b2) - C(b1,a2) - C(a1,b2) + C(a1,a2)`
    /// over all grid cells.
    pub fn min_rectangle_mass(&self) -> f64 {
        let (n1, n2) = (self.v1.len(), self.v2.len());
        let mut worst = f64::INFINITY;
        for i in 0..n1 - 1 {
            for j in 0..n2 - 1 {
                let m = self.at(i + 1, j + 1) - self.at(i + 1, j) - self.at(i, j + 1) + self.at(i, j);
                worst = worst.min(m);
            }
        }
        worst
    }

    /// Writes `v1,v2,C,c` rows (`c` empty when no density was computed).
    pub fn to_csv_writer(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["v1", "v2", "C", "c"])?;
        for (i, a) in self.v1.iter().enumerate() {
            for (j, b) in self.v2.iter().enumerate() {
                let d = self.density_at(i, j).map(|d| d.to_string()).unwrap_or_default();
                wr.write_record([a.to_string(), b.to_string(), self.at(i, j).to_string(), d])?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

fn boundary_value(a: f64, b: f64) -> Option<f64> {
    if a <= 0.0 || b <= 0.0 {
        Some(0.0)
    } else if a >= 1.0 {
        Some(b)
    } else if b >= 1.0 {
        Some(a)
    } else {
        None
    }
}

/// Model copula `C(v1, v2) = G(G1^{-1}(v1), G2^{-1}(v2))` and density
/// `c = g(G1^{-1}, G2^{-1}) / (g1 g2)` from the joint characteristic
/// function.
pub fn copula_from_cf(ctx: &CFContext, spec: &CopulaSpec, cfg: &NumericsConfig) -> Result<CopulaGrid> {
    if spec.n < 2 || !(spec.v_min > 0.0 && spec.v_min < 0.5) {
        return Err(Error::invalid("copula grid needs n >= 2 and 0 < v_min < 0.5"));
    }
    let lattice1 = Lattice::default_1d(cfg);
    let lattice2 = spec.lattice.unwrap_or_else(|| Lattice::default_2d(cfg));
    let interior = linspace(spec.v_min, 1.0 - spec.v_min, spec.n);
    let quantiles = |leg: Leg| -> Result<Vec<f64>> {
        let grid = default_grid(ctx, leg, spec.marginal_points);
        let g = marginal_cdf(ctx, leg, cfg.smoothing_a, &grid, lattice1)?;
        interior.iter().map(|&v| g.inverse(v)).collect()
    };
    let q1 = quantiles(Leg::First)?;
    let q2 = quantiles(Leg::Second)?;

    let raw = joint_cdf_spectrum(ctx, cfg.smoothing_a1, cfg.smoothing_a2, lattice2)?.eval_grid(&q1, &q2);
    let v = v_axis(spec.n, spec.v_min);
    let m = v.len();
    let n = spec.n;
    let mut c = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            c[i * m + j] = boundary_value(v[i], v[j]).unwrap_or_else(|| raw[(i - 1) * n + (j - 1)].clamp(0.0, 1.0));
        }
    }

    let mut masked = vec![false; m * m];
    let density = if spec.density {
        let joint = joint_pdf_spectrum(ctx, lattice2)?.eval_grid(&q1, &q2);
        let g1 = marginal_pdf_spectrum(ctx, Leg::First, lattice1)?.eval_many(&q1);
        let g2 = marginal_pdf_spectrum(ctx, Leg::Second, lattice1)?.eval_many(&q2);
        let mut d = vec![0.0; m * m];
        for i in 0..n {
            for j in 0..n {
                let idx = (i + 1) * m + (j + 1);
                let val = joint[i * n + j] / (g1[i] * g2[j]);
                if g1[i] < DENSITY_MASK || g2[j] < DENSITY_MASK || !val.is_finite() || val < DENSITY_FLOOR {
                    masked[idx] = true;
                } else {
                    d[idx] = val.max(0.0);
                }
            }
        }
        fill_masked(&mut d, &masked, m);
        // Boundary rows and columns copy their interior neighbour.
        for i in 0..m {
            for j in 0..m {
                let (a, b) = (i.clamp(1, m - 2), j.clamp(1, m - 2));
                if (a, b) != (i, j) {
                    d[i * m + j] = d[a * m + b];
                }
            }
        }
        Some(d)
    } else {
        None
    };
    let masked_fraction = masked.iter().filter(|&&b| b).count() as f64 / (n * n) as f64;
    Ok(CopulaGrid {
        v1: v.clone(),
        v2: v,
        c,
        density,
        masked,
        masked_fraction,
        q1,
        q2,
    })
}

/// Replaces masked interior cells by linear interpolation between the
/// nearest unmasked cells of the same row, falling back to the column.
fn fill_masked(d: &mut [f64], masked: &[bool], m: usize) {
    let line = |d: &[f64], idx: &dyn Fn(usize) -> usize, k: usize| -> Option<f64> {
        let left = (1..k).rev().find(|&t| !masked[idx(t)]);
        let right = (k + 1..m - 1).find(|&t| !masked[idx(t)]);
        match (left, right) {
            (Some(l), Some(r)) => {
                let s = (k - l) as f64 / (r - l) as f64;
                Some((1.0 - s) * d[idx(l)] + s * d[idx(r)])
            }
            (Some(l), None) => Some(d[idx(l)]),
            (None, Some(r)) => Some(d[idx(r)]),
            (None, None) => None,
        }
    };
    let snapshot = d.to_vec();
    for i in 1..m - 1 {
        for j in 1..m - 1 {
            if !masked[i * m + j] {
                continue;
            }
            let row = line(&snapshot, &|t| i * m + t, j);
            let col = || line(&snapshot, &|t| t * m + j, i);
            d[i * m + j] = row.or_else(col).unwrap_or(0.0);
        }
    }
}

/// Scalar dependence measures of a copula grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DependenceMeasures {
    #[serde(rename = "tau_K")]
    pub tau_k: f64,
    #[serde(rename = "rho_S")]
    pub rho_s: f64,
    #[serde(rename = "sigma_SW")]
    pub sigma_sw: f64,
    /// `90 int (C - v1 v2)^2`, without the customary square root.
    #[serde(rename = "phi_H_squared_form")]
    pub phi_h_squared_form: f64,
}

/// Kendall's tau, Spearman's rho, Schweizer-Wolff sigma and the squared
/// form of Hoeffding's phi.
///
/// `tau = 4 int C dC - 1` is taken as a Stieltjes sum over grid cells
/// (cell mass times the mean of `C` at the cell's lower-left and upper-right
/// corners), which needs no density and stays exact for singular copulas
/// such as `min(v1, v2)`. The other three are trapezoid integrals of `C`.
pub fn dependence_measures(grid: &CopulaGrid) -> Result<DependenceMeasures> {
    if grid.masked_fraction > MAX_MASKED {
        return Err(Error::numerical(format!(
            "{:.2}% of the copula density cells are masked",
            100.0 * grid.masked_fraction
        )));
    }
    let (v1, v2) = (&grid.v1, &grid.v2);
    let (n1, n2) = (v1.len(), v2.len());
    let w1 = crate::transforms::trapezoid_weights(v1);
    let w2 = crate::transforms::trapezoid_weights(v2);
    let (mut int_c, mut int_abs, mut int_sq) = (0.0, 0.0, 0.0);
    for i in 0..n1 {
        for j in 0..n2 {
            let c = grid.at(i, j);
            let d = c - v1[i] * v2[j];
            let w = w1[i] * w2[j];
            int_c += w * c;
            int_abs += w * d.abs();
            int_sq += w * d * d;
        }
    }
    let mut stieltjes = 0.0;
    for i in 0..n1 - 1 {
        for j in 0..n2 - 1 {
            let mass = grid.at(i + 1, j + 1) - grid.at(i + 1, j) - grid.at(i, j + 1) + grid.at(i, j);
            stieltjes += mass * 0.5 * (grid.at(i, j) + grid.at(i + 1, j + 1));
        }
    }
    Ok(DependenceMeasures {
        tau_k: 4.0 * stieltjes - 1.0,
        rho_s: 12.0 * int_c - 3.0,
        sigma_sw: 12.0 * int_abs,
        phi_h_squared_form: 90.0 * int_sq,
    })
}

// ---------------------------------------------------------------------------
// Marginal-based spread pricing

/// Marginal distribution functions of the two legs at price level,
/// `G_k(p) = P(F(T, T_k) <= p)`, backed by log-return CDF grids.
#[derive(Debug, Clone)]
pub struct PriceMarginals {
    pub first: GridFunction1D,
    pub second: GridFunction1D,
    pub forwards: (f64, f64),
}

impl PriceMarginals {
    pub fn new(first: GridFunction1D, second: GridFunction1D, f1: f64, f2: f64) -> Result<Self> {
        if !(f1 > 0.0 && f2 > 0.0) {
            return Err(Error::invalid("forward prices must be positive"));
        }
        Ok(Self {
            first,
            second,
            forwards: (f1, f2),
        })
    }

    /// Marginals of the model on default grids (2001 points, mean +/- 12 sd).
    pub fn from_context(ctx: &CFContext, f1: f64, f2: f64, cfg: &NumericsConfig) -> Result<Self> {
        let lattice = Lattice::default_1d(cfg);
        let g = |leg| marginal_cdf(ctx, leg, cfg.smoothing_a, &default_grid(ctx, leg, 2001), lattice);
        Self::new(g(Leg::First)?, g(Leg::Second)?, f1, f2)
    }

    pub fn cdf1(&self, p: f64) -> f64 {
        if p <= 0.0 {
            0.0
        } else {
            self.first.eval((p / self.forwards.0).ln())
        }
    }

    pub fn cdf2(&self, q: f64) -> f64 {
        if q <= 0.0 {
            0.0
        } else {
            self.second.eval((q / self.forwards.1).ln())
        }
    }

    fn quantile(g: &GridFunction1D, f: f64, u: f64) -> f64 {
        let n = g.values.len();
        let u = u.clamp(g.values[0], g.values[n - 1]);
        f * g.inverse(u).unwrap_or(g.x[0]).exp()
    }

    pub fn quantile1(&self, u: f64) -> f64 {
        Self::quantile(&self.first, self.forwards.0, u)
    }

    pub fn quantile2(&self, u: f64) -> f64 {
        Self::quantile(&self.second, self.forwards.1, u)
    }

    /// Price-level ends of the grids.
    fn range(g: &GridFunction1D, f: f64) -> (f64, f64) {
        (f * g.x[0].exp(), f * g.x[g.x.len() - 1].exp())
    }
}

/// Calendar spread calls under a Gaussian copula for a fixed contract: the
/// marginal values at the quadrature nodes are cached so that pricing at
/// many correlations is cheap.
#[derive(Debug, Clone)]
pub struct GaussianCopulaPricer {
    cso: CsoContract,
    forwards: (f64, f64),
    weights: Vec<f64>,
    /// `(Phi^-1(G1(x + K)), G2(x), Phi^-1(G2(x)))` per node.
    nodes: Vec<(f64, f64, f64)>,
}

impl GaussianCopulaPricer {
    const PANELS: usize = 64;

    /// `CSC = D int_0^inf [G2(x) - C(G1(x + K), G2(x))] dx`.
    pub fn new(marginals: &PriceMarginals, cso: &CsoContract) -> Result<Self> {
        cso.validate()?;
        let (f1, f2) = marginals.forwards;
        let k = cso.strike;
        let (lo2, _) = PriceMarginals::range(&marginals.second, f2);
        let (_, hi1) = PriceMarginals::range(&marginals.first, f1);
        let (a, b) = (lo2, hi1 - k);
        let mut weights = Vec::new();
        let mut nodes = Vec::new();
        if b > a {
            let (gx, gw) = gauss_legendre(16);
            let (la, lb) = (a.ln(), b.ln());
            let h = (lb - la) / Self::PANELS as f64;
            for p in 0..Self::PANELS {
                let mid = la + (p as f64 + 0.5) * h;
                for (t, w) in gx.iter().zip(&gw) {
                    let x = (mid + 0.5 * h * t).exp();
                    let u1 = marginals.cdf1(x + k);
                    let v2 = marginals.cdf2(x);
                    weights.push(0.5 * h * w * x);
                    nodes.push((norm_quantile(u1), v2, norm_quantile(v2)));
                }
            }
        }
        Ok(Self {
            cso: *cso,
            forwards: (f1, f2),
            weights,
            nodes,
        })
    }

    /// Discounted call price at correlation `rho`.
    pub fn call(&self, rho: f64) -> Result<f64> {
        if !(rho > -1.0 && rho < 1.0) {
            return Err(Error::invalid(format!("Gaussian copula needs -1 < rho < 1, got {rho}")));
        }
        let s: f64 = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(&(z1, v2, z2), w)| {
                let joint = if z1 == f64::NEG_INFINITY || z2 == f64::NEG_INFINITY {
                    0.0
                } else if z1 == f64::INFINITY {
                    v2
                } else {
                    bvn_cdf(z1, z2, rho)
                };
                w * (v2 - joint)
            })
            .sum();
        Ok(self.cso.discount() * s.max(0.0))
    }

    /// Price of the contract's own kind; puts by parity.
    pub fn price(&self, rho: f64) -> Result<f64> {
        let call = self.call(rho)?;
        Ok(match self.cso.kind {
            OptionKind::Call => call,
            OptionKind::Put => (call - self.parity()).max(0.0),
        })
    }

    fn parity(&self) -> f64 {
        self.cso.discount() * (self.forwards.0 - self.forwards.1 - self.cso.strike)
    }
}

pub fn price_cso_gaussian_copula(marginals: &PriceMarginals, rho: f64, cso: &CsoContract) -> Result<PriceResult> {
    let p = GaussianCopulaPricer::new(marginals, cso)?;
    Ok(PriceResult::new(p.price(rho)?, Method::GaussianCopula)
        .with("rho", rho)
        .with("nodes", p.nodes.len() as f64))
}

/// Spread call prices under the comonotone and countermonotone couplings
/// of the given marginals, `(CSC+, CSC-)`. The comonotone coupling
/// (`rho = +1`) gives the lower price. Computed in quantile space, with
/// `u = Phi(z)` spreading the nodes into both tails.
pub fn frechet_bound_prices(marginals: &PriceMarginals, cso: &CsoContract) -> Result<(f64, f64)> {
    cso.validate()?;
    let k = cso.strike;
    let h = 2.0 * FRECHET_Z / FRECHET_NODES as f64;
    let (lower, upper) = (0..FRECHET_NODES)
        .into_par_iter()
        .map(|i| {
            let z0 = -FRECHET_Z + i as f64 * h;
            let w = norm_cdf(z0 + h) - norm_cdf(z0);
            let u = norm_cdf(z0 + 0.5 * h);
            let a = marginals.quantile1(u);
            let co = (a - marginals.quantile2(u) - k).max(0.0);
            let counter = (a - marginals.quantile2(1.0 - u) - k).max(0.0);
            (w * co, w * counter)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((0.0, 0.0), |acc, v| (acc.0 + v.0, acc.1 + v.1));
    let d = cso.discount();
    Ok((d * lower, d * upper))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ImpliedCorrelation {
    pub rho: f64,
    /// Set when the root sits at the edge of the search bracket or beyond
    /// `|rho| = 0.999`.
    pub near_boundary: bool,
    pub residual: f64,
    pub iterations: usize,
    /// Arbitrage-free band `(CSC+, CSC-)` for the call.
    pub band: (f64, f64),
}

/// Correlation of the Gaussian copula that reproduces `observed` (a call
/// price, or a put price for put contracts, which is mapped through
/// parity), given the marginals.
pub fn implied_correlation(
    marginals: &PriceMarginals,
    cso: &CsoContract,
    observed: f64,
    cfg: &NumericsConfig,
) -> Result<ImpliedCorrelation> {
    let pricer = GaussianCopulaPricer::new(marginals, cso)?;
    let target = match cso.kind {
        OptionKind::Call => observed,
        OptionKind::Put => observed + pricer.parity(),
    };
    let band = frechet_bound_prices(marginals, cso)?;
    let tol = cfg.root_price_tolerance.max(1e-8);
    if target < band.0 - tol {
        return Err(Error::NoSolution(format!(
            "price {target:.8} is below the comonotone (rho = +1) bound {:.8}",
            band.0
        )));
    }
    if target > band.1 + tol {
        return Err(Error::NoSolution(format!(
            "price {target:.8} is above the countermonotone (rho = -1) bound {:.8}",
            band.1
        )));
    }
    // The call price decreases in rho.
    let f = |rho: f64| -> Result<f64> { Ok(pricer.call(rho)? - target) };
    let (mut a, mut b) = (-1.0 + RHO_EDGE, 1.0 - RHO_EDGE);
    let (mut fa, mut fb) = (f(a)?, f(b)?);
    let result = |rho: f64, residual: f64, iterations: usize, edge: bool| ImpliedCorrelation {
        rho,
        near_boundary: edge || rho.abs() > 0.999,
        residual,
        iterations,
        band,
    };
    if fa <= 0.0 {
        return Ok(result(a, fa, 0, true));
    }
    if fb >= 0.0 {
        return Ok(result(b, fb, 0, true));
    }
    // Bisection safeguarded secant (Illinois variant of false position).
    let mut side = 0i8;
    for it in 1..=200 {
        let c = (a * fb - b * fa) / (fb - fa);
        let c = if c > a && c < b { c } else { 0.5 * (a + b) };
        let fc = f(c)?;
        if fc.abs() < tol || (b - a) < cfg.root_x_tolerance {
            return Ok(result(c, fc, it, false));
        }
        if fc > 0.0 {
            a = c;
            fa = fc;
            if side == 1 {
                fb *= 0.5;
            }
            side = 1;
        } else {
            b = c;
            fb = fc;
            if side == -1 {
                fa *= 0.5;
            }
            side = -1;
        }
    }
    Err(Error::NonConvergence {
        method: "implied correlation",
        detail: format!("bracket [{a}, {b}] after 200 iterations"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthant_probabilities() {
        for rho in [-0.95, -0.5, 0.0, 0.2, 0.6, 0.8, 0.99] {
            let p = bvn_cdf(0.0, 0.0, rho);
            assert!((p - (0.25 + rho.asin() / (2.0 * PI))).abs() < 1e-14, "rho {rho}");
        }
    }

    #[test]
    fn quantile_round_trip() {
        for p in [1e-12, 1e-4, 0.3, 0.5, 0.97, 1.0 - 1e-10] {
            assert!((norm_cdf(norm_quantile(p)) - p).abs() < 1e-15_f64.max(1e-13 * p));
        }
    }
}
