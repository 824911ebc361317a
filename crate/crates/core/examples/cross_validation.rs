//! Five-fold cross-validated predictions and a binned calibration table.
//!
//!     cargo run --release --example cross_validation

use dynlatent::optimizer::FitConfig;
use dynlatent::prediction::{default_bin_edges, gof_binned, kfold_cv, GofScale};
use dynlatent::sim::{generate, replicate_rng, scenario1};

fn main() -> dynlatent::error::Result<()> {
    let scenario = scenario1();
    let data = generate(&scenario.truth, 200, &mut replicate_rng(5, 0))?;

    let cv = kfold_cv(&data, 5, 42, &scenario.fit_spec, &FitConfig::default(), None)?;
    for f in &cv.folds {
        match &f.error {
            None => println!("fold {}: {} train / {} test, converged={}", f.fold, f.n_train, f.n_test, f.converged),
            Some(e) => println!("fold {} failed: {e}", f.fold),
        }
    }

    // every held-out subject was predicted from a fit that never saw it
    let edges = default_bin_edges(&scenario.fit_spec, 1.0)?;
    let rows = gof_binned(&cv.predictions, &edges, GofScale::Transformed)?;
    let inside = rows
        .iter()
        .filter(|r| match (r.ci_lo, r.ci_hi, r.mean_predicted) {
            (Some(lo), Some(hi), Some(p)) => lo <= p && p <= hi,
            _ => false,
        })
        .count();
    println!("{inside} of {} bins: prediction inside the 95% band of the observed mean", rows.len());
    Ok(())
}
