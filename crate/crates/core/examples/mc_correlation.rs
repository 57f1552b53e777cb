//! Monte Carlo distribution of the instantaneous correlation between the
//! one- and two-year futures after one year. Pass a file name to write the
//! histogram as CSV.

use commodity_sv::model::ModelParams;
use commodity_sv::montecarlo::{instantaneous_correlation_study, McSettings};

fn main() -> commodity_sv::error::Result<()> {
    let model = ModelParams::reference_sv2f();
    let settings = McSettings::default().with_paths(200_000);
    let study = instantaneous_correlation_study(&model, 1.0, 1.0, 2.0, &settings)?;
    println!("mean {:.6} +- {:.6} over {} paths", study.mean.mean, study.mean.stderr, study.samples.len());

    let (lo, hi) = study
        .samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    println!("range [{lo:.4}, {hi:.4}]");

    let mut deterministic = model.clone();
    for f in &mut deterministic.factors {
        f.sigma = 0.0;
    }
    let det = instantaneous_correlation_study(&deterministic, 1.0, 1.0, 2.0, &settings.with_paths(2_000))?;
    println!("with vol of vol switched off: {:.7}", det.mean.mean);

    if let Some(path) = std::env::args().nth(1) {
        study.histogram.to_csv_writer(std::fs::File::create(&path)?)?;
        println!("histogram written to {path}");
    }
    Ok(())
}
