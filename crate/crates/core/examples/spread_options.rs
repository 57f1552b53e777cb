//! Calendar spread options by every available engine, including negative
//! strikes and the exchange option limit.

use commodity_sv::model::{CsoContract, FuturesCurve, ModelParams, NumericsConfig, OptionKind};
use commodity_sv::montecarlo::{mc_price_cso, McSettings};
use commodity_sv::pricers::{margrabe, price_cso, price_cso_ladder, CsoMethod};

fn main() -> commodity_sv::error::Result<()> {
    let model = ModelParams::reference_sv2f();
    let curve = FuturesCurve::flat(100.0);
    let cfg = NumericsConfig::default();
    let cso = CsoContract {
        expiry: 0.25,
        t1: 0.25,
        t2: 0.75,
        strike: 0.5,
        kind: OptionKind::Call,
        rate: 0.0,
    };

    let strikes = [-5.0, -2.5, 0.0, 2.5, 5.0];
    let cf = price_cso_ladder(&model, &curve, &cso, &strikes, CsoMethod::CaldanaFusai, &cfg)?;
    let hz = price_cso_ladder(&model, &curve, &cso, &strikes, CsoMethod::HurdZhou, &cfg)?;
    println!("{:>6} {:>12} {:>12}", "K", "lower bound", "2d fft");
    for ((k, a), b) in strikes.iter().zip(&cf).zip(&hz) {
        println!("{k:>6} {:>12.6} {:>12.6}", a.price, b.price);
    }

    let si = price_cso(&model, &curve, &cso, CsoMethod::SingleIntegral, &cfg)?;
    let mc = mc_price_cso(&model, &curve, &cso, &McSettings::default().with_paths(200_000))?;
    println!("\nK = 0.5: single integral {:.6}, monte carlo {:.6} +- {:.6}", si.price, mc.price, mc.stderr.unwrap_or(f64::NAN));

    let put = price_cso(&model, &curve, &cso.with_kind(OptionKind::Put), CsoMethod::CaldanaFusai, &cfg)?;
    let call = price_cso(&model, &curve, &cso, CsoMethod::CaldanaFusai, &cfg)?;
    println!("parity: call - put = {:.12} (forward {:.12})", call.price - put.price, -cso.strike);

    let cs = ModelParams::clewlow_strickland(&[(0.4, 0.1), (0.3, 2.0)]);
    let legs = FuturesCurve::new(vec![(0.25, 104.0), (0.75, 98.0)])?;
    let x = price_cso(&cs, &legs, &cso.with_strike(0.0), CsoMethod::CaldanaFusai, &cfg)?;
    let c = |a, b| cs.expected_covariance(0.25, a, b);
    let var = c(0.25, 0.25) + c(0.75, 0.75) - 2.0 * c(0.25, 0.75);
    println!("exchange option: fourier {:.10}, margrabe {:.10}", x.price, margrabe(104.0, 98.0, var, 1.0));
    Ok(())
}
