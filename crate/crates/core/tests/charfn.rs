use commodity_sv::charfn::{
    closed_form_a, closed_form_ab, phi_cs, solve_riccati, solve_riccati_at, Backend, CFContext,
};
use commodity_sv::model::{DeterministicFactor, FactorParams, FuturesCurve, ModelParams};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn rel(a: Complex64, b: Complex64) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

fn table1() -> ModelParams {
    ModelParams::reference_sv2f()
}

fn contexts(t: f64, t1: f64, t2: f64) -> (CFContext, CFContext) {
    let closed = CFContext::new(table1(), t, t1, t2).unwrap().with_fallback(false);
    let ode = CFContext::new(table1(), t, t1, t2).unwrap().with_backend(Backend::Ode);
    (closed, ode)
}

#[test]
fn phi_is_one_at_origin_and_martingale_points() {
    let (closed, ode) = contexts(1.0, 1.0, 2.0);
    for ctx in [&closed, &ode] {
        assert_eq!(ctx.phi(c(0.0, 0.0), c(0.0, 0.0)).unwrap(), c(1.0, 0.0));
        assert!((ctx.phi(c(0.0, -1.0), c(0.0, 0.0)).unwrap() - 1.0).norm() < 1e-8);
        assert!((ctx.phi(c(0.0, 0.0), c(0.0, -1.0)).unwrap() - 1.0).norm() < 1e-8);
    }
}

#[test]
fn martingale_points_with_leverage() {
    let mut m = table1();
    m.factors[0].rho = -0.6;
    m.factors[1].rho = 0.4;
    for backend in [Backend::ClosedForm, Backend::Ode] {
        let ctx = CFContext::new(m.clone(), 0.5, 1.0, 2.0)
            .unwrap()
            .with_backend(backend)
            .with_fallback(false);
        assert!((ctx.phi(c(0.0, -1.0), c(0.0, 0.0)).unwrap() - 1.0).norm() < 1e-8, "{backend:?}");
        assert!((ctx.phi(c(0.0, 0.0), c(0.0, -1.0)).unwrap() - 1.0).norm() < 1e-8, "{backend:?}");
    }
}

#[test]
fn backends_agree_on_random_grid() {
    let (closed, ode) = contexts(1.0, 1.0, 2.0);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let u1 = c(rng.random_range(-40.0..40.0), rng.random_range(-5.0..5.0));
        let u2 = c(rng.random_range(-40.0..40.0), rng.random_range(-5.0..5.0));
        let o = ode.phi(u1, u2).unwrap();
        let k = closed.phi(u1, u2).unwrap();
        // Far in the tails phi underflows towards zero; compare on the log scale there.
        if o.norm() > 1e-200 {
            assert!(rel(k, o) < 1e-6, "u = ({u1}, {u2}): closed {k}, ode {o}");
        }
    }
    assert_eq!(closed.fallback_count(), 0);
}

#[test]
fn backends_agree_with_leverage() {
    let mut m = table1();
    m.factors[0].rho = -0.7;
    m.factors[1].rho = 0.3;
    let closed = CFContext::new(m.clone(), 0.75, 1.0, 1.5).unwrap().with_fallback(false);
    let ode = CFContext::new(m, 0.75, 1.0, 1.5).unwrap().with_backend(Backend::Ode);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let u1 = c(rng.random_range(-20.0..20.0), rng.random_range(-3.0..3.0));
        let u2 = c(rng.random_range(-20.0..20.0), rng.random_range(-3.0..3.0));
        let o = ode.phi(u1, u2).unwrap();
        let k = closed.phi(u1, u2).unwrap();
        assert!(rel(k, o) < 1e-6, "u = ({u1}, {u2}): closed {k}, ode {o}");
    }
}

#[test]
fn riccati_is_zero_at_zero_argument() {
    let f = table1().factors[0];
    let (a, b) = solve_riccati(&f, c(0.0, 0.0), c(0.0, 0.0), 1.0, 1.0, 2.0).unwrap();
    assert_eq!((a, b), (c(0.0, 0.0), c(0.0, 0.0)));
    let (a, b) = closed_form_ab(&f, c(0.0, 0.0), c(0.0, 0.0), 1.0, 1.0, 2.0).unwrap();
    assert_eq!((a, b), (c(0.0, 0.0), c(0.0, 0.0)));
}

#[test]
fn riccati_without_vol_of_vol_matches_quadrature() {
    // sigma = 0 leaves a linear ODE solved by variation of constants;
    // reference values from 30-digit quadrature of that integral.
    let f = FactorParams {
        kappa: 1.0,
        theta: 0.16,
        sigma: 0.0,
        rho: 0.0,
        v0: 0.16,
        lambda: 0.1,
    };
    let (a, b) = solve_riccati(&f, c(0.7, 0.2), c(-0.4, 0.0), 0.8, 1.0, 1.5).unwrap();
    let a_want = c(0.033_359_811_196_710_157, -0.112_687_791_297_247_43);
    let b_want = c(0.002_499_210_751_959_037_4, -0.008_442_210_238_059_451_6);
    assert!(rel(a, a_want) < 1e-9, "{a}");
    assert!(rel(b, b_want) < 1e-9, "{b}");
}

#[test]
fn factor_one_closed_form_matches_ode() {
    let f = table1().factors[0];
    let (a_o, b_o) = solve_riccati(&f, c(1.0, 0.0), c(0.0, 0.0), 0.5, 1.0, 2.0).unwrap();
    let (a_c, b_c) = closed_form_ab(&f, c(1.0, 0.0), c(0.0, 0.0), 0.5, 1.0, 2.0).unwrap();
    assert!(rel(a_c, a_o) < 1e-6, "{a_c} vs {a_o}");
    assert!(rel(b_c, b_o) < 1e-6, "{b_c} vs {b_o}");
}

#[test]
fn closed_form_a_matches_ode_inside_the_interval() {
    let f = table1().factors[0];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let u1 = c(rng.random_range(-10.0..10.0), rng.random_range(-2.0..2.0));
        let u2 = c(rng.random_range(-10.0..10.0), rng.random_range(-2.0..2.0));
        let t = rng.random_range(0.0..1.0);
        let a_c = closed_form_a(&f, u1, u2, t, 1.0, 1.0, 2.0).unwrap();
        let (a_o, _) = solve_riccati_at(&f, u1, u2, t, 1.0, 1.0, 2.0).unwrap();
        assert!(rel(a_c, a_o) < 1e-6, "t = {t}, u = ({u1}, {u2}): {a_c} vs {a_o}");
    }
}

#[test]
fn closed_form_a_is_continuous_in_t() {
    // A branch jump would show up as a step far larger than the local
    // variation of the reference solution.
    let f = table1().factors[0];
    let (u1, u2) = (c(25.0, -1.5), c(-12.0, 0.5));
    let n = 200;
    let ts: Vec<f64> = (0..=n).map(|k| k as f64 / n as f64).collect();
    let closed: Vec<Complex64> = ts
        .iter()
        .map(|&t| closed_form_a(&f, u1, u2, t, 1.0, 1.0, 2.0).unwrap())
        .collect();
    let ode: Vec<Complex64> = ts
        .iter()
        .map(|&t| solve_riccati_at(&f, u1, u2, t, 1.0, 1.0, 2.0).unwrap().0)
        .collect();
    for k in 0..n {
        let jump = (closed[k + 1] - closed[k]).norm();
        let local = (ode[k + 1] - ode[k]).norm();
        assert!(jump < 10.0 * local + 1e-9, "t = {}: jump {jump}, local {local}", ts[k]);
    }
}

#[test]
fn clewlow_strickland_matches_gaussian_cf() {
    let f = [DeterministicFactor {
        sigma_hat: 0.4,
        lambda: 0.1,
    }];
    let got = phi_cs(&f, c(1.0, 0.0), c(1.0, 0.0), 1.0, 1.0, 2.0);
    let want = c(0.762_000_727_655_254_58, -0.101_073_120_895_221_51);
    assert!(rel(got, want) < 1e-13, "{got}");
    assert_eq!(phi_cs(&f, c(0.0, 0.0), c(0.0, 0.0), 1.0, 1.0, 2.0), c(1.0, 0.0));
    assert!((phi_cs(&f, c(0.0, -1.0), c(0.0, 0.0), 1.0, 1.0, 2.0) - 1.0).norm() < 1e-15);
}

#[test]
fn clewlow_strickland_zero_damping_limit() {
    let f0 = [DeterministicFactor {
        sigma_hat: 0.3,
        lambda: 0.0,
    }];
    let f1 = [DeterministicFactor {
        sigma_hat: 0.3,
        lambda: 1e-9,
    }];
    let u = (c(0.8, -0.3), c(-0.5, 0.1));
    let a = phi_cs(&f0, u.0, u.1, 1.0, 1.5, 2.0);
    let b = phi_cs(&f1, u.0, u.1, 1.0, 1.5, 2.0);
    assert!(rel(a, b) < 1e-8);
    // Zero damping is plain Brownian motion with variance sigma^2 T in both legs.
    let v = 0.09;
    let s = u.0 + u.1;
    let want = (-0.5 * v * (Complex64::i() * s + s * s)).exp();
    assert!(rel(a, want) < 1e-14);
}

#[test]
fn deterministic_factors_multiply_in() {
    let mut m = table1();
    m.deterministic_factors.push(DeterministicFactor {
        sigma_hat: 0.2,
        lambda: 0.5,
    });
    let ctx = CFContext::new(m.clone(), 1.0, 1.0, 2.0).unwrap();
    let base = CFContext::new(table1(), 1.0, 1.0, 2.0).unwrap();
    let u = (c(1.3, 0.0), c(-0.7, 0.0));
    let want = base.phi(u.0, u.1).unwrap() * phi_cs(&m.deterministic_factors, u.0, u.1, 1.0, 1.0, 2.0);
    assert!(rel(ctx.phi(u.0, u.1).unwrap(), want) < 1e-13);
}

#[test]
fn factorization_over_factors() {
    let m = table1();
    let full = CFContext::new(m.clone(), 1.0, 1.0, 2.0).unwrap();
    let one = CFContext::new(ModelParams::new(vec![m.factors[0]]), 1.0, 1.0, 2.0).unwrap();
    let two = CFContext::new(ModelParams::new(vec![m.factors[1]]), 1.0, 1.0, 2.0).unwrap();
    for &(u1, u2) in &[(c(1.0, 0.0), c(0.5, 0.0)), (c(-3.0, 1.0), c(7.0, -2.0))] {
        let prod = one.phi(u1, u2).unwrap() * two.phi(u1, u2).unwrap();
        assert!(rel(full.phi(u1, u2).unwrap(), prod) < 1e-13);
    }
}

#[test]
fn price_level_shift() {
    let ctx = CFContext::new(table1(), 1.0, 1.0, 2.0).unwrap();
    let unit = FuturesCurve::flat(1.0);
    let u = (c(0.4, 0.1), c(-0.2, 0.0));
    assert_eq!(
        ctx.phi_price_level(&unit, u.0, u.1).unwrap(),
        ctx.phi(u.0, u.1).unwrap()
    );
    let curve = FuturesCurve::flat(50.0);
    let v = ctx.phi(c(1.0, 0.0), c(0.0, 0.0)).unwrap();
    let got = ctx.phi_price_level(&curve, c(1.0, 0.0), c(0.0, 0.0)).unwrap();
    let want = v * Complex64::from_polar(1.0, 50f64.ln());
    assert!(rel(got, want) < 1e-14);
    assert_eq!(
        ctx.phi_price_level(&curve, c(0.0, 0.0), c(0.0, 0.0)).unwrap(),
        c(1.0, 0.0)
    );
}

#[test]
fn strip_bound_contains_the_martingale_shift() {
    let ctx = CFContext::new(table1(), 1.0, 1.0, 2.0).unwrap();
    let s = ctx.strip_bound(1.0, 0.0, 16.0);
    assert!(s > 1.0, "{s}");
    let s_neg = ctx.strip_bound(-1.0, 0.0, 16.0);
    assert!(s_neg > 1.0, "{s_neg}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn hermitian_and_bounded(u1 in -30.0..30.0f64, u2 in -30.0..30.0f64) {
        let ctx = CFContext::new(table1(), 1.0, 1.0, 2.0).unwrap();
        let p = ctx.phi(c(u1, 0.0), c(u2, 0.0)).unwrap();
        let m = ctx.phi(c(-u1, 0.0), c(-u2, 0.0)).unwrap();
        prop_assert!((m - p.conj()).norm() <= 1e-12 * p.norm().max(1e-12));
        prop_assert!(p.norm() <= 1.0 + 1e-12);
    }
}
