//! Fits a deterministic two-factor model and part of a stochastic
//! two-factor model to option prices generated by the stochastic model.

use commodity_sv::calib::{calibrate, error_report, OptimizerConfig, ParamBounds, QuoteSet};
use commodity_sv::charfn::Backend;
use commodity_sv::model::{FuturesCurve, ModelParams, NumericsConfig};

fn main() -> commodity_sv::error::Result<()> {
    let cfg = NumericsConfig {
        cf_backend: Backend::Ode,
        ..Default::default()
    };
    let truth = ModelParams::reference_sv2f();
    let quotes = QuoteSet::standard(&truth, FuturesCurve::flat(100.0), 0.0, &cfg)?;
    println!("{} quotes", quotes.quotes.len());

    let cs = ModelParams::clewlow_strickland(&[(0.35, 0.2), (0.25, 1.5)]);
    let opt = OptimizerConfig {
        starts: 4,
        max_evals: 1500,
        ..Default::default()
    };
    let fit = calibrate(&cs, &quotes, &ParamBounds::default_for(&cs), &opt, &cfg)?;
    println!("\nCS2F: {:?}", fit.theta_star.deterministic_factors);
    println!("  RMSE price {:.2e}, vol {:.2e}", fit.errors.rmse.price, fit.errors.rmse.vol);

    // Free only the variance levels; everything else sits at the truth.
    let mut start = truth.clone();
    start.factors[0].v0 = 0.25;
    start.factors[1].theta = 0.05;
    let bounds = ParamBounds::frozen(&start)
        .set("f0.v0", 0.01, 0.6)?
        .set("f1.theta", 0.01, 0.6)?;
    let before = error_report(&start, &quotes, &cfg)?;
    let opt = OptimizerConfig {
        starts: 2,
        max_evals: 400,
        ..Default::default()
    };
    let fit = calibrate(&start, &quotes, &bounds, &opt, &cfg)?;
    println!(
        "\nSV2F: v0 {:.6}, theta {:.6} ({} evaluations)",
        fit.theta_star.factors[0].v0, fit.theta_star.factors[1].theta, fit.evaluations
    );
    println!("  RMSE price {:.2e} -> {:.2e}", before.rmse.price, fit.errors.rmse.price);
    Ok(())
}
