//! A marker measured on a bounded, curvilinear scale: the second marker of the
//! `s1` scenario is squashed into (0, 10) and fitted through a monotone
//! I-spline link whose knots sit at the marker quantiles.
//!
//!     cargo run --release --example ispline_link

use dynlatent::likelihood::Problem;
use dynlatent::optimizer::{fit, FitConfig};
use dynlatent::prediction::{predict_natural, Mode};
use dynlatent::sim::{generate, replicate_rng, scenario1};
use dynlatent::spec::LinkSpec;

fn squash(y: f64) -> f64 {
    10.0 / (1.0 + (-(y - 2.6) / 1.2).exp())
}

fn main() -> dynlatent::error::Result<()> {
    let scenario = scenario1();
    let mut data = generate(&scenario.truth, 300, &mut replicate_rng(11, 0))?;
    for s in &mut data.subjects {
        for v in &mut s.visits {
            if let Some(y) = v.values[1].as_mut() {
                *y = squash(*y);
            }
        }
    }

    let mut spec = scenario.fit_spec.clone();
    spec.markers[1].link = LinkSpec::Ispline { internal_knots: 2, knots: None };
    let problem = Problem::new(&spec, &data)?;
    println!("knots for Y2: {:.3?}", problem.links()[1].knots().unwrap_or(&[]));

    let result = fit(&problem, &FitConfig::default())?;
    println!("converged={} loglik={:.2} ({} parameters)", result.converged, result.loglik, result.n_params);
    let theta = problem.layout().unpack(&result.theta_hat)?;

    // estimated link against the generating one, up to location and scale
    let link = &problem.links()[1];
    println!("{:>6} {:>10} {:>10}", "y", "H(y)", "logit");
    for y in [0.5, 2.0, 4.0, 6.0, 8.0, 9.5] {
        let h = link.transform(&theta.eta[1], y)?.value;
        println!("{y:>6.2} {h:>10.3} {:>10.3}", (y / (10.0 - y)).ln());
    }

    let preds = predict_natural(&problem, &theta, 0, Mode::SubjectSpecific, 2000, 1)?;
    println!("subject {} on the natural scale:", data.subjects[0].id);
    for p in preds.iter().filter(|p| p.marker == 1) {
        println!("  grid {:>2}: {:.3} (MC se {:.3})", p.grid_index, p.mean, p.mc_se);
    }
    Ok(())
}
