//! Small coverage study: bias, empirical and average standard errors and
//! Wald-interval coverage over simulated replicates.
//!
//!     cargo run --release --example coverage_study -- [replicates] [n_subjects]

use dynlatent::optimizer::FitConfig;
use dynlatent::sim::scenario1;
use dynlatent::sim::study::run_coverage_study;

fn main() -> dynlatent::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let reps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(20);
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);

    let report = run_coverage_study(&scenario1(), n, reps, None, 2024, &FitConfig::default())?;
    println!(
        "{}: {} of {} replicates converged ({:.1}%)",
        report.scenario,
        report.converged,
        report.attempted,
        report.convergence_rate_pct()
    );
    println!("{:<26} {:>8} {:>8} {:>8} {:>7} {:>7} {:>6}", "parameter", "true", "mean", "bias%", "ESE", "ASE", "cov%");
    for r in &report.rows {
        println!(
            "{:<26} {:>8.3} {:>8.3} {:>8.1} {:>7.3} {:>7.3} {:>6.1}",
            r.parameter, r.true_value, r.mean_estimate, r.rel_bias_pct, r.ese, r.ase, r.coverage_pct
        );
    }
    Ok(())
}
