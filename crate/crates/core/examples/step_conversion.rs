//! Moving a temporal-influence matrix between discretization steps.
//!
//! A constant influence `A` at step `delta = delta_star / rho` compounds into
//! `((I + delta A)^rho - I) / delta_star` at step `delta_star`; the inverse
//! uses the principal matrix root.
//!
//!     cargo run --example step_conversion

use dynlatent::sim::stepconv::{coarse_to_fine, fine_to_coarse_const, influence_from_continuous, trend_to_coarse};
use nalgebra::{DMatrix, DVector};

fn main() -> dynlatent::error::Result<()> {
    // the three-process influences at step 1
    let coarse = DMatrix::from_row_slice(3, 3, &[-0.05, 0.03, -0.02, 0.06, -0.08, -0.04, -0.03, -0.10, -0.06]);
    println!("A at step 1:{coarse:.4}");

    for rho in [2, 10, 1000] {
        let fine = coarse_to_fine(&coarse, 1.0, rho)?;
        let back = fine_to_coarse_const(&fine, 1.0, rho)?;
        println!("A at step 1/{rho}:{fine:.5}  round trip error {:.2e}\n", (&back - &coarse).amax());
    }

    // as rho grows the fine influence approaches the generator of a continuous system
    let generator = coarse_to_fine(&coarse, 1.0, 100_000)?;
    let again = influence_from_continuous(&generator, 1.0)?;
    println!("continuous generator reproduces A within {:.2e}", (&again - &coarse).amax());

    // trend intercepts move with the influences
    let fine = coarse_to_fine(&coarse, 1.0, 1000)?;
    let gamma_fine = DVector::from_column_slice(&[-0.05, -0.08, 0.10]);
    let gamma_coarse = trend_to_coarse(&gamma_fine, &fine, 1.0, 1000)?;
    println!("trend intercepts at step 1/1000 {:?} -> step 1 {:.5?}", gamma_fine.as_slice(), gamma_coarse.as_slice());
    Ok(())
}
