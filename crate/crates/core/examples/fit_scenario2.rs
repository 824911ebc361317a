//! Simulate a bivariate dataset from the built-in `s2` scenario, thin it with
//! the usual intermittent missingness and fit the model.
//!
//!     cargo run --release --example fit_scenario2 -- [n_subjects] [seed]

use dynlatent::io::fit_table_csv;
use dynlatent::likelihood::Problem;
use dynlatent::optimizer::{fit, FitConfig};
use dynlatent::sim::study::Missingness;
use dynlatent::sim::{apply_missingness, generate, replicate_rng, scenario2};

fn main() -> dynlatent::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(300);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(7);

    let scenario = scenario2();
    let mut rng = replicate_rng(seed, 0);
    let full = generate(&scenario.truth, n, &mut rng)?;
    let m = Missingness::DESIGN;
    let data = apply_missingness(&full, m.p_visit, m.p_marker, &mut rng)?;

    let problem = Problem::new(&scenario.fit_spec, &data)?;
    println!("{} subjects, {} observations, {} parameters", problem.n_subjects(), problem.n_observations(), problem.n_params());

    let result = fit(&problem, &FitConfig::default())?;
    println!(
        "converged={} after {} iterations, loglik={:.3}, AIC={:.3}",
        result.converged, result.iterations, result.loglik, result.aic
    );

    // estimates next to the generating values
    let truth = scenario.fit_truth.as_deref().unwrap_or(&[]);
    println!("{:<28} {:>10} {:>10} {:>9}", "parameter", "true", "estimate", "se");
    for (i, name) in result.names.iter().enumerate() {
        let t = truth.get(i).copied().unwrap_or(f64::NAN);
        println!("{name:<28} {t:>10.4} {:>10.4} {:>9.4}", result.theta_hat[i], result.se[i]);
    }
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }

    // the same table as written by `dynlatent fit`
    let _csv = fit_table_csv(&result)?;
    Ok(())
}
