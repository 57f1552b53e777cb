//! Gaussian-copula correlation implied by model spread option prices across
//! strikes and calendar gaps.

use commodity_sv::charfn::CFContext;
use commodity_sv::dependence::{frechet_bound_prices, implied_correlation, PriceMarginals};
use commodity_sv::model::{CsoContract, FuturesCurve, ModelParams, NumericsConfig, OptionKind};
use commodity_sv::pricers::{price_cso_ladder, CsoMethod};

fn main() -> commodity_sv::error::Result<()> {
    let model = ModelParams::reference_sv2f();
    let curve = FuturesCurve::flat(100.0);
    let cfg = NumericsConfig::default();
    let shifts = [-10.0, -5.0, -2.5, 0.0, 2.5, 5.0, 10.0];

    print!("{:>6}", "gap");
    for d in shifts {
        print!(" {d:>8}");
    }
    println!();
    for gap in [0.25, 0.5, 0.75, 1.0] {
        let (t, t1, t2) = (0.25, 0.25, 0.25 + gap);
        let cso = CsoContract {
            expiry: t,
            t1,
            t2,
            strike: 0.0,
            kind: OptionKind::Call,
            rate: 0.0,
        };
        let atm = curve.price(t1) - curve.price(t2);
        let strikes: Vec<f64> = shifts.iter().map(|d| atm + d).collect();
        let prices = price_cso_ladder(&model, &curve, &cso, &strikes, CsoMethod::CaldanaFusai, &cfg)?;
        let ctx = CFContext::new(model.clone(), t, t1, t2)?;
        let marginals = PriceMarginals::from_context(&ctx, curve.price(t1), curve.price(t2), &cfg)?;
        print!("{gap:>6}");
        for (k, p) in strikes.iter().zip(&prices) {
            let ic = implied_correlation(&marginals, &cso.with_strike(*k), p.price, &cfg)?;
            print!(" {:>8.5}", ic.rho);
        }
        println!();
    }

    // Prices outside the band spanned by perfect positive and negative
    // dependence have no implied correlation.
    let ctx = CFContext::new(model, 0.25, 0.25, 0.75)?;
    let marginals = PriceMarginals::from_context(&ctx, 100.0, 100.0, &cfg)?;
    let cso = CsoContract {
        expiry: 0.25,
        t1: 0.25,
        t2: 0.75,
        strike: 0.0,
        kind: OptionKind::Call,
        rate: 0.0,
    };
    let (lo, hi) = frechet_bound_prices(&marginals, &cso)?;
    println!("\nATM band [{lo:.4}, {hi:.4}]");
    match implied_correlation(&marginals, &cso, hi + 1.0, &cfg) {
        Err(e) => println!("price {:.4}: {e} (exit code {})", hi + 1.0, e.exit_code()),
        Ok(ic) => println!("unexpected solution {ic:?}"),
    }
    Ok(())
}
