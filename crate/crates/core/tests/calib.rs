use commodity_sv::calib::*;
use commodity_sv::charfn::Backend;
use commodity_sv::model::*;
use commodity_sv::pricers::black76;
use proptest::prelude::*;

fn cfg() -> NumericsConfig {
    NumericsConfig {
        cf_backend: Backend::Ode,
        ..Default::default()
    }
}

fn sv2f_quotes() -> QuoteSet {
    QuoteSet::standard(&ModelParams::reference_sv2f(), FuturesCurve::flat(100.0), 0.0, &cfg()).unwrap()
}

fn bump(quotes: &QuoteSet, index: usize, by: f64) -> QuoteSet {
    let mut q = quotes.clone();
    q.quotes[index].value += by;
    q
}

#[test]
fn standard_grid_layout() {
    let q = sv2f_quotes();
    assert_eq!(q.quotes.len(), 35);
    assert!(q.is_complete_grid());
    assert_eq!(q.quotes.iter().filter(|x| x.is_atm(&q.curve)).count(), 5);
    let mut partial = q.clone();
    partial.quotes.pop();
    assert!(!partial.is_complete_grid());
}

#[test]
fn objective_vanishes_on_own_quotes() {
    let q = sv2f_quotes();
    let m = ModelParams::reference_sv2f();
    assert!(objective(&m, &q, &cfg()) < 1e-10);
    let bumped = bump(&q, 17, 0.5);
    let o = objective(&m, &bumped, &cfg());
    assert!((o - 0.25).abs() < 1e-10, "{o}");
}

#[test]
fn objective_reports_failures_as_infinity() {
    let q = sv2f_quotes();
    let mut m = ModelParams::reference_sv2f();
    m.factors[0].sigma = -0.1;
    assert_eq!(objective(&m, &q, &cfg()), f64::INFINITY);
    assert!(objective_checked(&m, &q, &cfg()).is_err());
}

#[test]
fn implied_vol_round_trip() {
    for (f, k, t, r) in [(100.0, 100.0, 1.0, 0.0), (100.0, 60.0, 0.2, 0.03), (50.0, 80.0, 3.0, 0.01)] {
        for kind in [OptionKind::Call, OptionKind::Put] {
            let p = black76(f, k, t, 0.2, r, kind);
            let iv = implied_vol_black76(p, f, k, t, r, kind).unwrap();
            assert!((iv.vol - 0.2).abs() < 1e-8, "{f} {k} {t} {kind:?}: {iv:?}");
            assert!(!iv.near_boundary);
            let back = black76(f, k, t, iv.vol, r, kind);
            assert!((back - p).abs() < 1e-10);
        }
    }
}

#[test]
fn implied_vol_at_intrinsic_is_flagged() {
    let iv = implied_vol_black76(10.0 + 1e-12, 100.0, 90.0, 1.0, 0.0, OptionKind::Call).unwrap();
    assert!(iv.near_boundary);
    assert!(iv.vol < 1e-3, "{iv:?}");
}

#[test]
fn implied_vol_for_tiny_prices() {
    let (f, k, t) = (100.0, 400.0, 0.5);
    let p = black76(f, k, t, 0.3, 0.0, OptionKind::Call);
    assert!(p < 1e-6 && p > 0.0, "{p}");
    let iv = implied_vol_black76(p, f, k, t, 0.0, OptionKind::Call).unwrap();
    assert!((iv.vol - 0.3).abs() < 1e-6, "{iv:?}");
    let p = black76(f, 20.0, 0.1, 0.05, 0.0, OptionKind::Put);
    let iv = implied_vol_black76(p.max(1e-300), f, 20.0, 0.1, 0.0, OptionKind::Put).unwrap();
    assert!(iv.near_boundary);
}

#[test]
fn implied_vol_rejects_out_of_band_prices() {
    let e = implied_vol_black76(120.0, 100.0, 100.0, 1.0, 0.0, OptionKind::Call).unwrap_err();
    assert_eq!(e.exit_code(), 4);
    let e = implied_vol_black76(5.0, 100.0, 90.0, 1.0, 0.0, OptionKind::Call).unwrap_err();
    assert_eq!(e.exit_code(), 4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn implied_vol_inverts_black76(vol in 0.02f64..1.5, m in 0.5f64..2.0, t in 0.05f64..5.0, r in 0.0f64..0.1, call in any::<bool>()) {
        let kind = if call { OptionKind::Call } else { OptionKind::Put };
        let (f, k) = (100.0, 100.0 * m);
        let p = black76(f, k, t, vol, r, kind);
        let iv = implied_vol_black76(p, f, k, t, r, kind).unwrap();
        prop_assert!((black76(f, k, t, iv.vol, r, kind) - p).abs() < 1e-10);
        // time value above 1e-7 pins the volatility down
        let otm = black76(f, k, t, vol, r, if k >= f { OptionKind::Call } else { OptionKind::Put });
        if otm > 1e-7 {
            prop_assert!((iv.vol - vol).abs() < 1e-6, "{} vs {}", iv.vol, vol);
        }
    }
}

#[test]
fn error_report_arithmetic() {
    let q = sv2f_quotes();
    let m = ModelParams::reference_sv2f();
    let perfect = error_report(&m, &q, &cfg()).unwrap();
    assert!(perfect.mae.price < 1e-12 && perfect.rmse.price < 1e-12);
    assert!(perfect.mae.vol < 1e-9 && perfect.mae_atm.vol < 1e-9);
    assert_eq!((perfect.quotes, perfect.atm_quotes, perfect.vol_failures), (35, 5, 0));

    let r = error_report(&m, &bump(&q, 3, 0.2), &cfg()).unwrap();
    assert!((r.mae.price - 0.2 / 35.0).abs() < 1e-10, "{}", r.mae.price);
    assert!((r.rmse.price - (0.04f64 / 35.0).sqrt()).abs() < 1e-10);
    assert!((r.mae_atm.price - 0.2 / 5.0).abs() < 1e-10, "{}", r.mae_atm.price);
    assert!(r.mae.vol > 0.0);
}

#[test]
fn error_report_ignores_quote_order() {
    let q = bump(&bump(&sv2f_quotes(), 3, 0.2), 20, -0.1);
    let mut shuffled = q.clone();
    shuffled.quotes.reverse();
    shuffled.quotes.swap(0, 17);
    let m = ModelParams::reference_sv2f();
    let a = error_report(&m, &q, &cfg()).unwrap();
    let b = error_report(&m, &shuffled, &cfg()).unwrap();
    for (x, y) in [
        (a.mae.price, b.mae.price),
        (a.mae.vol, b.mae.vol),
        (a.mae_atm.price, b.mae_atm.price),
        (a.rmse.price, b.rmse.price),
        (a.rmse.vol, b.rmse.vol),
    ] {
        assert!((x - y).abs() < 1e-14, "{x} vs {y}");
    }
}

#[test]
fn quote_csv_round_trip_and_errors() {
    let q = sv2f_quotes();
    let mut buf = Vec::new();
    q.to_csv_writer(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("T,Tm,moneyness_or_strike,strike_kind,value_kind,value,flag\n"));
    let back = QuoteSet::from_csv_reader(text.as_bytes(), 0.0, q.curve.clone()).unwrap();
    assert_eq!(back, q);

    let bad = "T,Tm,moneyness_or_strike,strike_kind,value_kind,value,flag\n1,1,1.0,moneyness,price,8.0,call\n1,1,oops,moneyness,price,8.0,call\n";
    match QuoteSet::from_csv_reader(bad.as_bytes(), 0.0, FuturesCurve::flat(100.0)) {
        Err(commodity_sv::error::Error::Parse { line: Some(3), .. }) => {}
        other => panic!("{other:?}"),
    }
    let unknown = "T,Tm,moneyness_or_strike,strike_kind,value_kind,value,flag\n1,1,1.0,moneyness,price,8.0,straddle\n";
    assert!(QuoteSet::from_csv_reader(unknown.as_bytes(), 0.0, FuturesCurve::flat(100.0)).is_err());
    // price above the forward bound
    let rich = "T,Tm,moneyness_or_strike,strike_kind,value_kind,value,flag\n1,1,100,strike,price,101,call\n";
    let e = QuoteSet::from_csv_reader(rich.as_bytes(), 0.0, FuturesCurve::flat(100.0)).unwrap_err();
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn vol_quotes_are_converted() {
    let curve = FuturesCurve::flat(100.0);
    let q = Quote {
        expiry: 1.0,
        futures_maturity: 1.0,
        strike_input: 110.0,
        strike_kind: StrikeKind::Absolute,
        value_kind: ValueKind::Vol,
        value: 0.25,
        kind: OptionKind::Call,
    };
    let set = QuoteSet::new(vec![q], 0.02, curve).unwrap();
    let p = set.observed_price(&set.quotes[0]);
    assert!((p - black76(100.0, 110.0, 1.0, 0.25, 0.02, OptionKind::Call)).abs() < 1e-14);
    assert_eq!(set.observed_vol(&set.quotes[0]).unwrap(), 0.25);
}

#[test]
fn parameter_vector_layout() {
    let m = ModelParams::reference_sv2f();
    let x = flatten(&m);
    assert_eq!(x.len(), 12);
    assert_eq!(unflatten(&m, &x), m);
    let names = param_names(&m);
    assert_eq!(names[4], "f0.v0");
    assert_eq!(names[11], "f1.lambda");
    let cs = ModelParams::clewlow_strickland(&[(0.4, 0.1), (0.3, 2.0)]);
    assert_eq!(param_names(&cs), vec!["d0.sigma_hat", "d0.lambda", "d1.sigma_hat", "d1.lambda"]);
    assert!(ParamBounds::default_for(&m).contains(&x));
    let bad = ParamBounds::default_for(&m).set("f0.sigma", -0.1, 1.0).unwrap();
    assert!(bad.validate(&m).is_err());
    assert!(ParamBounds::default_for(&m).set("f9.kappa", 0.0, 1.0).is_err());
}

#[test]
fn single_free_parameter_is_recovered() {
    let truth = ModelParams::reference_sv2f();
    let curve = FuturesCurve::flat(100.0);
    let q = QuoteSet::synthetic(&truth, curve, 0.0, &[1.0], &[1.0], &cfg()).unwrap();
    let mut start = truth.clone();
    start.factors[0].v0 = 0.3;
    let bounds = ParamBounds::frozen(&start).set("f0.v0", 0.01, 0.5).unwrap();
    let opt = OptimizerConfig {
        starts: 1,
        ..Default::default()
    };
    let r = calibrate(&start, &q, &bounds, &opt, &cfg()).unwrap();
    assert!((r.theta_star.factors[0].v0 - 0.16).abs() < 1e-6, "{:?}", r.theta_star.factors[0]);
    assert_eq!(r.theta_star.factors[1], truth.factors[1]);
}

#[test]
fn calibration_never_worsens_the_start_and_is_deterministic() {
    let truth = ModelParams::clewlow_strickland(&[(0.4, 0.1), (0.3, 2.0)]);
    let q = QuoteSet::standard(&truth, FuturesCurve::flat(100.0), 0.01, &cfg()).unwrap();
    let opt = OptimizerConfig {
        starts: 4,
        screen_evals: 60,
        max_evals: 400,
        ..Default::default()
    };
    let bounds = ParamBounds::default_for(&truth);
    let at_truth = calibrate(&truth, &q, &bounds, &opt, &cfg()).unwrap();
    assert!(at_truth.objective <= at_truth.initial_objective);
    assert!(at_truth.objective < 1e-20);

    let start = ModelParams::clewlow_strickland(&[(0.6, 0.3), (0.2, 1.0)]);
    let a = calibrate(&start, &q, &bounds, &opt, &cfg()).unwrap();
    let b = calibrate(&start, &q, &bounds, &opt, &cfg()).unwrap();
    assert_eq!(a, b);
    assert!(a.objective < a.initial_objective);
    assert_eq!(a.log.len(), 5);
    assert!(a.log.iter().all(|l| l.objective >= a.objective));
}

#[test]
fn deterministic_model_round_trip() {
    let truth = ModelParams::clewlow_strickland(&[(0.4, 0.1), (0.3, 2.0)]);
    let q = QuoteSet::standard(&truth, FuturesCurve::flat(100.0), 0.0, &cfg()).unwrap();
    let start = ModelParams::clewlow_strickland(&[(0.5, 0.2), (0.25, 1.5)]);
    let r = calibrate(&start, &q, &ParamBounds::default_for(&truth), &OptimizerConfig::default(), &cfg()).unwrap();
    assert!(r.errors.rmse.price < 1e-4, "{:?}", r.errors);
    let mut buf = Vec::new();
    r.to_json_writer(&mut buf).unwrap();
    let json: serde_json::Value = serde_json::from_slice(&buf).unwrap();
    for key in ["theta_star", "objective", "errors", "residuals", "log"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    assert!(json["errors"]["MAE_ATM"]["vol"].is_number());
}

#[test]
fn vol_space_objective_fits_too() {
    let truth = ModelParams::clewlow_strickland(&[(0.4, 0.1)]);
    let q = QuoteSet::standard(&truth, FuturesCurve::flat(100.0), 0.0, &cfg()).unwrap();
    let start = ModelParams::clewlow_strickland(&[(0.3, 0.5)]);
    let opt = OptimizerConfig {
        space: ObjectiveSpace::Vol,
        starts: 2,
        ..Default::default()
    };
    let r = calibrate(&start, &q, &ParamBounds::default_for(&truth), &opt, &cfg()).unwrap();
    assert_eq!(r.space, ObjectiveSpace::Vol);
    assert!(r.errors.rmse.vol < 1e-6, "{:?}", r.errors);
    let d = r.theta_star.deterministic_factors[0];
    assert!((d.sigma_hat - 0.4).abs() < 1e-4 && (d.lambda - 0.1).abs() < 1e-3, "{d:?}");
}

#[test]
fn partial_stochastic_round_trip() {
    // levels and initial variances free, dynamics held at the truth
    let truth = ModelParams::reference_sv2f();
    let q = sv2f_quotes();
    let mut start = truth.clone();
    start.factors[0].theta = 0.2;
    start.factors[0].v0 = 0.1;
    start.factors[1].theta = 0.05;
    start.factors[1].v0 = 0.12;
    let mut bounds = ParamBounds::frozen(&start);
    for name in ["f0.theta", "f0.v0", "f1.theta", "f1.v0"] {
        bounds = bounds.set(name, 1e-3, 0.6).unwrap();
    }
    let opt = OptimizerConfig {
        starts: 2,
        screen_evals: 100,
        max_evals: 900,
        ..Default::default()
    };
    let r = calibrate(&start, &q, &bounds, &opt, &cfg()).unwrap();
    assert!(r.errors.rmse.price < 1e-4, "{:?}", r.errors);
}
