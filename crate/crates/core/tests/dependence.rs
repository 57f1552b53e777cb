use std::f64::consts::PI;

use commodity_sv::charfn::{Backend, CFContext};
use commodity_sv::dependence::*;
use commodity_sv::model::*;
use commodity_sv::pricers::{norm_cdf, price_cso_caldana_fusai, price_cso_single_integral};
use commodity_sv::transforms::{quad_interval, Lattice, QuadSettings};
use num_complex::Complex64;
use proptest::prelude::*;

fn cfg() -> NumericsConfig {
    NumericsConfig {
        cf_backend: Backend::Ode,
        ..NumericsConfig::default()
    }
}

fn cs2f() -> ModelParams {
    ModelParams::clewlow_strickland(&[(0.4, 0.1), (0.3, 2.0)])
}

fn table_cso(strike: f64) -> CsoContract {
    CsoContract {
        expiry: 0.25,
        t1: 0.25,
        t2: 0.75,
        strike,
        kind: OptionKind::Call,
        rate: 0.0,
    }
}

fn correlation(model: &ModelParams, t: f64, t1: f64, t2: f64) -> f64 {
    let c = |a, b| model.expected_covariance(t, a, b);
    c(t1, t2) / (c(t1, t1) * c(t2, t2)).sqrt()
}

/// `P(X < x, Y < y)` as `int_{-inf}^x phi(t) Phi((y - rho t)/sqrt(1 - rho^2)) dt`.
fn bvn_by_quadrature(x: f64, y: f64, rho: f64) -> f64 {
    let s = (1.0 - rho * rho).sqrt();
    let settings = QuadSettings {
        tolerance: 1e-14,
        ..QuadSettings::default()
    };
    let f = |t: f64| {
        let v = (-0.5 * t * t).exp() / (2.0 * PI).sqrt() * norm_cdf((y - rho * t) / s);
        Complex64::new(v, 0.0)
    };
    quad_interval(f, -40.0, x, &settings).unwrap().value.re
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn bivariate_normal_matches_quadrature(x in -6.0f64..6.0, y in -6.0f64..6.0, rho in -0.999f64..0.999) {
        let a = bvn_cdf(x, y, rho);
        let b = bvn_by_quadrature(x, y, rho);
        prop_assert!((a - b).abs() < 1e-10, "({x}, {y}, {rho}): {a} vs {b}");
    }
}

#[test]
fn reference_copula_measures() {
    let ind = dependence_measures(&CopulaGrid::independence(101)).unwrap();
    for m in [ind.tau_k, ind.rho_s, ind.sigma_sw, ind.phi_h_squared_form] {
        assert!(m.abs() < 5e-3, "{ind:?}");
    }
    let co = dependence_measures(&CopulaGrid::comonotone(101)).unwrap();
    assert!((co.tau_k - 1.0).abs() < 1e-2 && (co.rho_s - 1.0).abs() < 1e-2, "{co:?}");
    let g = dependence_measures(&CopulaGrid::gaussian(0.5, 101)).unwrap();
    assert!((g.tau_k - 1.0 / 3.0).abs() < 5e-3, "{g:?}");
    assert!((g.rho_s - 6.0 / PI * (0.25f64).asin()).abs() < 5e-3, "{g:?}");
}

fn check_copula_axioms(g: &CopulaGrid) {
    let m = g.v1.len();
    for i in 0..m {
        assert!(g.at(i, 0).abs() < 2e-3 && g.at(0, i).abs() < 2e-3);
        assert!((g.at(i, m - 1) - g.v1[i]).abs() < 2e-3 && (g.at(m - 1, i) - g.v2[i]).abs() < 2e-3);
    }
    assert!(g.min_rectangle_mass() > -1e-3, "{}", g.min_rectangle_mass());
    if let Some(d) = &g.density {
        assert!(d.iter().all(|&c| c >= 0.0));
    }
}

#[test]
fn two_factor_lognormal_copula_is_gaussian() {
    let model = cs2f();
    let ctx = CFContext::new(model.clone(), 0.25, 0.25, 0.75).unwrap();
    let g = copula_from_cf(&ctx, &CopulaSpec::default(), &cfg()).unwrap();
    check_copula_axioms(&g);
    let rho = correlation(&model, 0.25, 0.25, 0.75);
    let mut worst: f64 = 0.0;
    for (i, a) in g.v1.iter().enumerate() {
        for (j, b) in g.v2.iter().enumerate() {
            worst = worst.max((g.at(i, j) - gaussian_copula(*a, *b, rho)).abs());
        }
    }
    assert!(worst < 2e-3, "max deviation {worst}");
    assert_eq!(g.masked_fraction, 0.0);
    // Density against the Gaussian copula density away from the corners.
    let gd = CopulaGrid::gaussian(rho, 101);
    for (i, j) in [(30, 30), (51, 51), (40, 70), (80, 75)] {
        let (a, b) = (g.density_at(i, j).unwrap(), gd.density_at(i, j).unwrap());
        assert!((a - b).abs() < 1e-3 * b.max(1.0), "({i},{j}) {a} vs {b}");
    }
}

#[test]
fn one_factor_copula_is_comonotone() {
    let model = ModelParams::clewlow_strickland(&[(0.4, 0.1)]);
    let ctx = CFContext::new(model, 0.5, 0.5, 1.5).unwrap();
    let spec = CopulaSpec {
        density: false,
        lattice: Some(Lattice::new(512, 0.1).unwrap()),
        ..CopulaSpec::default()
    };
    let g = copula_from_cf(&ctx, &spec, &cfg()).unwrap();
    let mut worst: f64 = 0.0;
    for (i, a) in g.v1.iter().enumerate() {
        for (j, b) in g.v2.iter().enumerate() {
            worst = worst.max((g.at(i, j) - a.min(*b)).abs());
        }
    }
    assert!(worst < 2e-3, "max deviation {worst}");
}

#[test]
fn stochastic_volatility_copula_is_a_copula() {
    let ctx = CFContext::new(ModelParams::reference_sv2f(), 0.25, 0.25, 0.75)
        .unwrap()
        .with_backend(Backend::Ode);
    let g = copula_from_cf(&ctx, &CopulaSpec::default(), &cfg()).unwrap();
    check_copula_axioms(&g);
    let top = g.v2.len() - 2;
    assert!((g.at(51, top) - 0.5).abs() < 2e-3, "{}", g.at(51, top));
    let m = dependence_measures(&g).unwrap();
    assert!(m.tau_k > 0.0 && m.tau_k < 1.0 && m.rho_s > m.tau_k, "{m:?}");
    let mut buf = Vec::new();
    g.to_csv_writer(&mut buf).unwrap();
    assert!(String::from_utf8(buf).unwrap().starts_with("v1,v2,C,c\n"));
    let json = serde_json::to_value(m).unwrap();
    for key in ["tau_K", "rho_S", "sigma_SW", "phi_H_squared_form"] {
        assert!(json.get(key).is_some(), "{key}");
    }
}

#[test]
fn kendall_tau_falls_along_the_maturity_ladder() {
    let spec = CopulaSpec {
        density: false,
        ..CopulaSpec::default()
    };
    let taus: Vec<f64> = [0.25, 0.5, 0.75, 1.0]
        .iter()
        .map(|gap| {
            let ctx = CFContext::new(ModelParams::reference_sv2f(), 0.25, 0.25, 0.25 + gap)
                .unwrap()
                .with_backend(Backend::Ode);
            dependence_measures(&copula_from_cf(&ctx, &spec, &cfg()).unwrap()).unwrap().tau_k
        })
        .collect();
    for w in taus.windows(2) {
        assert!(w[1] <= w[0], "{taus:?}");
    }
}

fn cs2f_marginals(f1: f64, f2: f64) -> PriceMarginals {
    let ctx = CFContext::new(cs2f(), 0.25, 0.25, 0.75).unwrap();
    PriceMarginals::from_context(&ctx, f1, f2, &cfg()).unwrap()
}

#[test]
fn gaussian_copula_price_with_the_true_correlation_matches_the_model() {
    let curve = FuturesCurve::new(vec![(0.25, 100.0), (0.75, 99.0)]).unwrap();
    let marginals = cs2f_marginals(100.0, 99.0);
    let rho = correlation(&cs2f(), 0.25, 0.25, 0.75);
    for k in [-1.0, 1.0, 3.0] {
        let cso = table_cso(k);
        let g = price_cso_gaussian_copula(&marginals, rho, &cso).unwrap().price;
        let si = price_cso_single_integral(&cs2f(), &curve, &cso, &cfg()).unwrap().price;
        assert!((g - si).abs() < 5e-3, "K={k}: copula {g} vs single integral {si}");
    }
}

#[test]
fn gaussian_copula_price_falls_with_correlation_within_the_frechet_band() {
    let marginals = cs2f_marginals(100.0, 100.0);
    let cso = table_cso(0.0);
    let pricer = GaussianCopulaPricer::new(&marginals, &cso).unwrap();
    let (lower, upper) = frechet_bound_prices(&marginals, &cso).unwrap();
    let ladder: Vec<f64> = (-9..=9).map(|i| pricer.price(i as f64 / 10.0).unwrap()).collect();
    for w in ladder.windows(2) {
        assert!(w[1] < w[0], "{ladder:?}");
    }
    assert!(upper >= ladder[0] && ladder[18] >= lower);
    let near_one = pricer.price(1.0 - 1e-6).unwrap();
    assert!((near_one - lower).abs() < 2e-3, "{near_one} vs {lower}");
    let near_minus_one = pricer.price(-1.0 + 1e-6).unwrap();
    assert!((near_minus_one - upper).abs() < 2e-3, "{near_minus_one} vs {upper}");
}

#[test]
fn frechet_bounds_edge_cases() {
    let marginals = cs2f_marginals(100.0, 97.0);
    let deep = table_cso(-400.0);
    let (lo, hi) = frechet_bound_prices(&marginals, &deep).unwrap();
    let fwd = 100.0 - 97.0 + 400.0;
    assert!((lo - fwd).abs() < 1e-4 * fwd && (hi - fwd).abs() < 1e-4 * fwd, "{lo} {hi}");

    // Identical marginals: the comonotone spread is identically zero.
    let ctx = CFContext::new(cs2f(), 0.25, 0.25, 0.75).unwrap();
    let same = PriceMarginals::from_context(&ctx, 100.0, 100.0, &cfg()).unwrap();
    let twin = PriceMarginals::new(same.first.clone(), same.first.clone(), 100.0, 100.0).unwrap();
    let (lo, hi) = frechet_bound_prices(&twin, &table_cso(0.0)).unwrap();
    assert_eq!(lo, 0.0);
    assert!(hi > 1.0);
}

#[test]
fn implied_correlation_inverts_the_copula_price() {
    let marginals = cs2f_marginals(100.0, 99.5);
    let c = cfg();
    for k in [0.5, 2.0] {
        let cso = table_cso(k);
        let pricer = GaussianCopulaPricer::new(&marginals, &cso).unwrap();
        for i in -19..=19 {
            let rho = 0.05 * i as f64;
            let p = pricer.price(rho).unwrap();
            let r = implied_correlation(&marginals, &cso, p, &c).unwrap();
            assert!((r.rho - rho).abs() < 1e-6, "K={k} rho={rho}: {}", r.rho);
            assert!(!r.near_boundary);
        }
    }
    let put = table_cso(0.5).with_kind(OptionKind::Put);
    let p = GaussianCopulaPricer::new(&marginals, &put).unwrap().price(0.7).unwrap();
    assert!((implied_correlation(&marginals, &put, p, &c).unwrap().rho - 0.7).abs() < 1e-6);
}

#[test]
fn implied_correlation_outside_the_band() {
    let marginals = cs2f_marginals(100.0, 100.0);
    let cso = table_cso(0.5);
    let c = cfg();
    let (lo, hi) = frechet_bound_prices(&marginals, &cso).unwrap();
    let err = implied_correlation(&marginals, &cso, hi + 0.01, &c).unwrap_err();
    assert_eq!(err.exit_code(), 4);
    assert!(err.to_string().contains("countermonotone"));
    let err = implied_correlation(&marginals, &cso, lo - 0.01, &c).unwrap_err();
    assert!(err.to_string().contains("comonotone"));
    let edge = implied_correlation(&marginals, &cso, hi, &c).unwrap();
    assert!(edge.near_boundary && edge.rho < -0.99, "{edge:?}");
}

#[test]
fn implied_correlation_of_the_model_falls_with_the_maturity_gap() {
    let model = ModelParams::reference_sv2f();
    let curve = FuturesCurve::flat(100.0);
    let c = cfg();
    let mut last = 1.0;
    for gap in [0.25, 0.5, 0.75, 1.0] {
        let cso = CsoContract {
            t2: 0.25 + gap,
            ..table_cso(0.5)
        };
        let price = price_cso_caldana_fusai(&model, &curve, &cso, 1.0, &c).unwrap().price;
        let ctx = CFContext::new(model.clone(), cso.expiry, cso.t1, cso.t2)
            .unwrap()
            .with_backend(Backend::Ode);
        let marginals = PriceMarginals::from_context(&ctx, 100.0, 100.0, &c).unwrap();
        let rho = implied_correlation(&marginals, &cso, price, &c).unwrap().rho;
        assert!(rho > 0.0 && rho < 1.0 && rho < last, "gap {gap}: rho {rho} after {last}");
        last = rho;
    }
}
