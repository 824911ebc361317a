//! Marginal and subject-specific predictions, then a binned goodness-of-fit
//! table on both the transformed and the natural scale.
//!
//!     cargo run --release --example predict_and_gof

use dynlatent::likelihood::Problem;
use dynlatent::optimizer::{fit, FitConfig};
use dynlatent::prediction::{default_bin_edges, gof_binned, predict_all, predict_transformed, Draws, GofScale, Mode};
use dynlatent::sim::{generate, replicate_rng, scenario2};

fn main() -> dynlatent::error::Result<()> {
    let scenario = scenario2();
    let data = generate(&scenario.truth, 250, &mut replicate_rng(3, 0))?;
    let problem = Problem::new(&scenario.fit_spec, &data)?;
    let result = fit(&problem, &FitConfig::default())?;
    let theta = problem.layout().unpack(&result.theta_hat)?;

    // one subject in detail
    let marginal = predict_transformed(&problem, &theta, 0, Mode::Marginal)?;
    let specific = predict_transformed(&problem, &theta, 0, Mode::SubjectSpecific)?;
    let markers = &problem.spec().markers;
    println!("subject {}:", data.subjects[0].id);
    for (m, s) in marginal.iter().zip(&specific) {
        println!(
            "  grid {:>2} {:<3} marginal {:>7.3} (sd {:.3})  subject-specific {:>7.3} (sd {:.3})",
            m.grid_index,
            markers[m.marker].name,
            m.mean,
            m.variance.sqrt(),
            s.mean,
            s.variance.sqrt()
        );
    }

    let set = predict_all(&problem, &result.theta_hat, Some(Draws { ndraws: 500, seed: 1 }))?;
    let edges = default_bin_edges(problem.spec(), 1.0)?;
    for scale in [GofScale::Transformed, GofScale::Natural] {
        println!("\n{scale:?} scale");
        println!("{:<10} {:<4} {:>5} {:>9} {:>9} {:>9} {:>9}", "bin", "mk", "n", "observed", "ci_lo", "ci_hi", "pred(ss)");
        for row in gof_binned(&set, &edges, scale)? {
            let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
            println!(
                "[{:>3},{:>3}) {:<4} {:>5} {:>9} {:>9} {:>9} {:>9}",
                row.lower,
                row.upper,
                row.marker,
                row.n,
                f(row.mean_observed),
                f(row.ci_lo),
                f(row.ci_hi),
                f(row.mean_predicted)
            );
        }
    }
    Ok(())
}
