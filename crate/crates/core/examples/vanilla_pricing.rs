//! Fourier prices of futures options across strikes and expiries, with
//! Black-76 implied volatilities and a Monte Carlo check.

use commodity_sv::calib::implied_vol_black76;
use commodity_sv::model::{FuturesCurve, ModelParams, NumericsConfig, OptionKind, VanillaContract};
use commodity_sv::montecarlo::{mc_price_vanilla, McSettings};
use commodity_sv::pricers::{black76, price_vanilla_fourier};

fn main() -> commodity_sv::error::Result<()> {
    let model = ModelParams::reference_sv2f();
    let curve = FuturesCurve::new(vec![(0.25, 98.0), (1.0, 100.0), (2.0, 101.5)])?;
    let cfg = NumericsConfig::default();

    println!("{:>5} {:>7} {:>12} {:>9}", "T", "K", "call", "iv");
    for t in [0.25, 1.0, 2.0] {
        let f = curve.price(t);
        for m in [0.8, 0.9, 1.0, 1.1, 1.25] {
            let c = VanillaContract {
                expiry: t,
                futures_maturity: t,
                strike: m * f,
                kind: OptionKind::Call,
                rate: 0.02,
            };
            let p = price_vanilla_fourier(&model, &curve, &c, &cfg)?.price;
            let iv = implied_vol_black76(p, f, c.strike, t, c.rate, c.kind)?.vol;
            println!("{t:>5} {:>7.2} {p:>12.6} {iv:>9.4}", c.strike);
        }
    }

    // One-factor deterministic volatility is log-normal, so Black-76 is exact.
    let cs = ModelParams::clewlow_strickland(&[(0.3, 0.5)]);
    let c = VanillaContract {
        expiry: 1.0,
        futures_maturity: 1.5,
        strike: 95.0,
        kind: OptionKind::Put,
        rate: 0.0,
    };
    let flat = FuturesCurve::flat(100.0);
    let var = cs.expected_covariance(1.0, 1.5, 1.5);
    let fourier = price_vanilla_fourier(&cs, &flat, &c, &cfg)?.price;
    let exact = black76(100.0, 95.0, 1.0, var.sqrt(), 0.0, OptionKind::Put);
    println!("\nCS1F put: fourier {fourier:.10}, black-76 {exact:.10}");

    let atm = VanillaContract {
        expiry: 1.0,
        futures_maturity: 1.0,
        strike: 100.0,
        kind: OptionKind::Call,
        rate: 0.0,
    };
    let fourier = price_vanilla_fourier(&model, &flat, &atm, &cfg)?.price;
    let mc = mc_price_vanilla(&model, &flat, &atm, &McSettings::default().with_paths(200_000))?;
    println!(
        "SV2F ATM call: fourier {fourier:.5}, monte carlo {:.5} +- {:.5}",
        mc.price,
        mc.stderr.unwrap_or(f64::NAN)
    );
    Ok(())
}
