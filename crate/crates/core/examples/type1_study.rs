//! Type-I error of the Wald test for a zero cross-influence when data from a
//! near-continuous system are fitted at a coarse step.
//!
//!     cargo run --release --example type1_study -- [replicates]

use dynlatent::optimizer::FitConfig;
use dynlatent::sim::study::run_type1_study;

fn main() -> dynlatent::error::Result<()> {
    let reps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    // influence of process 1 on process 2, fitted at two steps
    let report = run_type1_study(&[(1, 0)], &[1.0, 0.5], 300, reps, 9, 0.05, &FitConfig::default())?;
    for r in &report.rows {
        println!(
            "{:<28} delta={:<4} rejected {:>3} of {:>3} ({:.1}%), {} attempted",
            r.parameter, r.delta, r.rejected, r.n, r.rate_pct, r.attempted
        );
    }
    Ok(())
}
