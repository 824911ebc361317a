//! Command-line front end. [`run`] parses arguments, dispatches and maps
//! errors to exit codes: 0 success, 1 usage or input error, 2 numerical
//! failure (including a fit that did not converge).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::io::{fit_table_csv, load_long_csv, write_long_csv, FitMetadata};
use crate::likelihood::Problem;
use crate::optimizer::{fit, FitConfig};
use crate::prediction::{
    default_bin_edges, gof_binned, gof_plot_csv, gof_to_csv, kfold_cv, predict_all, Draws, GofScale,
};
use crate::sim::stepconv::{coarse_to_fine, fine_to_coarse_const, influence_from_continuous};
use crate::sim::study::StudyConfig;
use crate::sim::{apply_missingness, generate, replicate_rng, scenario_by_name, ScenarioFile};
use crate::spec::ModelSpec;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "dynlatent", version, about = "Dynamic latent-process network models for longitudinal markers")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Discretization step: overrides the spec in `fit`/`cv`, fine step in `convert-step`.
    #[arg(long, global = true)]
    delta: Option<f64>,
    /// Iteration cap of the optimizer.
    #[arg(long, global = true)]
    max_iters: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Number of replicates (`simulate`, `study`).
    #[arg(long, global = true)]
    replicates: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Scale {
    Transformed,
    Natural,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a model: writes fit.csv and fit.json.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        spec: PathBuf,
    },
    /// Simulate data from a built-in scenario (s1, s2, s3) or a scenario JSON file.
    Simulate {
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value_t = 512)]
        n: usize,
        /// Probabilities of a missed visit and of a missing marker, e.g. `0.15,0.07`.
        #[arg(long, value_parser = parse_pair)]
        missingness: Option<(f64, f64)>,
    },
    /// Marginal and subject-specific predictions for a fitted model.
    Predict {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Monte-Carlo draws for natural-scale predictions (0 disables them).
        #[arg(long, default_value_t = 1000)]
        ndraws: usize,
    },
    /// Binned goodness-of-fit table and plot data.
    Gof {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Bin width in time units (default: the model step).
        #[arg(long, conflicts_with = "edges")]
        interval: Option<f64>,
        /// Explicit comma-separated bin edges.
        #[arg(long, value_delimiter = ',')]
        edges: Option<Vec<f64>>,
        #[arg(long, value_enum, default_value = "transformed")]
        scale: Scale,
        #[arg(long, default_value_t = 1000)]
        ndraws: usize,
    },
    /// k-fold cross-validated predictions.
    Cv {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        interval: Option<f64>,
    },
    /// Convert an influence matrix between steps.
    #[command(group(ArgGroup::new("direction").required(true).args(["fine_to_coarse", "coarse_to_fine", "from_continuous"])))]
    ConvertStep {
        /// Square matrix as headerless CSV.
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        delta_star: f64,
        #[arg(long)]
        fine_to_coarse: bool,
        #[arg(long)]
        coarse_to_fine: bool,
        /// Treat the matrix as a continuous-time generator.
        #[arg(long)]
        from_continuous: bool,
        #[arg(long, default_value = "converted.csv")]
        output: String,
    },
    /// Run a coverage or type-I error study from a JSON config.
    Study {
        #[arg(long)]
        config: PathBuf,
    },
}

fn parse_pair(s: &str) -> std::result::Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    match parts.as_slice() {
        [a, b] => Ok((
            a.trim().parse().map_err(|_| format!("bad number '{a}'"))?,
            b.trim().parse().map_err(|_| format!("bad number '{b}'"))?,
        )),
        _ => Err("expected two comma-separated probabilities".into()),
    }
}

/// Outcome of a command that ran to the end.
enum Status {
    Ok,
    /// Outputs were written but the numerics did not fully succeed.
    Numerical(String),
}

/// Entry point shared by the binary and the tests.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.threads {
        Some(0) => Err(Error::InvalidParameter("--threads must be at least 1".into())),
        Some(t) => match rayon::ThreadPoolBuilder::new().num_threads(t).build() {
            Ok(pool) => pool.install(|| execute(&cli)),
            Err(e) => Err(Error::InvalidParameter(e.to_string())),
        },
        None => execute(&cli),
    };
    match outcome {
        Ok(Status::Ok) => EXIT_OK,
        Ok(Status::Numerical(msg)) => {
            eprintln!("warning: {msg}");
            EXIT_NUMERICAL
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                EXIT_NUMERICAL
            } else {
                EXIT_USAGE
            }
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn fit_config(cli: &Cli) -> Result<FitConfig> {
    let mut cfg = FitConfig::default();
    if let Some(m) = cli.max_iters {
        cfg.max_iters = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_spec(cli: &Cli, path: &Path) -> Result<ModelSpec> {
    let spec = ModelSpec::from_json(&read(path)?)?;
    match cli.delta {
        Some(d) => spec.with_delta(d),
        None => Ok(spec),
    }
}

fn load_fit(path: &Path, data: &Path) -> Result<(FitMetadata, Problem)> {
    let meta = FitMetadata::from_json(&read(path)?)?;
    let dataset = load_long_csv(data, &meta.spec)?;
    let problem = Problem::from_subjects(meta.spec.clone(), dataset.bind(&meta.spec)?)?;
    Ok((meta, problem))
}

fn execute(cli: &Cli) -> Result<Status> {
    let out = &cli.out_dir;
    match &cli.command {
        Command::Fit { data, spec } => {
            let spec = load_spec(cli, spec)?;
            let dataset = load_long_csv(data, &spec)?;
            let problem = Problem::new(&spec, &dataset)?;
            let result = fit(&problem, &fit_config(cli)?)?;
            let meta = FitMetadata::new(&result, problem.spec(), problem.n_subjects(), problem.n_observations(), cli.seed)?;
            write(out, "fit.csv", &fit_table_csv(&result)?)?;
            write(out, "fit.json", &meta.to_json()?)?;
            for w in &result.warnings {
                eprintln!("warning: {w}");
            }
            if result.converged {
                Ok(Status::Ok)
            } else {
                Ok(Status::Numerical(format!("fit did not converge after {} iterations", result.iterations)))
            }
        }
        Command::Simulate { scenario, n, missingness } => {
            let sc = if Path::new(scenario).is_file() {
                ScenarioFile::from_json(&read(Path::new(scenario))?)?.into_scenario()?
            } else {
                scenario_by_name(scenario)?
            };
            let seed = cli.seed.unwrap_or(1);
            let reps = cli.replicates.unwrap_or(1);
            for r in 0..reps {
                let mut rng = replicate_rng(seed, r as u64);
                let mut data = generate(&sc.truth, *n, &mut rng)?;
                if let Some((pv, pm)) = missingness {
                    data = apply_missingness(&data, *pv, *pm, &mut rng)?;
                }
                let name = if reps == 1 { "data.csv".to_string() } else { format!("data_{:04}.csv", r + 1) };
                write(out, &name, &write_long_csv(&data)?)?;
            }
            write(out, "spec.json", &sc.fit_spec.to_json()?)?;
            if let Some(t) = &sc.fit_truth {
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record(["parameter", "value"])?;
                for (name, v) in crate::params::ParamLayout::new(&sc.fit_spec)?.names().iter().zip(t) {
                    w.write_record([name.clone(), v.to_string()])?;
                }
                write(out, "truth.csv", &crate::prediction::finish(w)?)?;
            }
            Ok(Status::Ok)
        }
        Command::Predict { fit, data, ndraws } => {
            let (meta, problem) = load_fit(fit, data)?;
            let draws = (*ndraws > 0).then(|| Draws { ndraws: *ndraws, seed: cli.seed.unwrap_or(0) });
            let set = predict_all(&problem, &meta.theta_hat, draws)?;
            write(out, "predictions.csv", &set.to_csv()?)?;
            Ok(Status::Ok)
        }
        Command::Gof { fit, data, interval, edges, scale, ndraws } => {
            let (meta, problem) = load_fit(fit, data)?;
            let scale = match scale {
                Scale::Transformed => GofScale::Transformed,
                Scale::Natural => GofScale::Natural,
            };
            let draws = (scale == GofScale::Natural).then(|| Draws { ndraws: *ndraws, seed: cli.seed.unwrap_or(0) });
            let set = predict_all(&problem, &meta.theta_hat, draws)?;
            let edges = match edges {
                Some(e) => e.clone(),
                None => default_bin_edges(&meta.spec, interval.unwrap_or(meta.spec.delta))?,
            };
            let rows = gof_binned(&set, &edges, scale)?;
            write(out, "gof.csv", &gof_to_csv(&rows)?)?;
            write(out, "gof_plot.csv", &gof_plot_csv(&rows, "subject_specific")?)?;
            Ok(Status::Ok)
        }
        Command::Cv { data, spec, k, interval } => {
            let spec = load_spec(cli, spec)?;
            let dataset = load_long_csv(data, &spec)?;
            let cv = kfold_cv(&dataset, *k, cli.seed.unwrap_or(0), &spec, &fit_config(cli)?, None)?;
            write(out, "cv_predictions.csv", &cv.predictions.to_csv()?)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["fold", "n_train", "n_test", "converged", "error"])?;
            for f in &cv.folds {
                w.write_record([
                    f.fold.to_string(),
                    f.n_train.to_string(),
                    f.n_test.to_string(),
                    f.converged.to_string(),
                    f.error.clone().unwrap_or_default(),
                ])?;
            }
            write(out, "cv_folds.csv", &crate::prediction::finish(w)?)?;
            if !cv.predictions.rows.is_empty() {
                let edges = default_bin_edges(&spec, interval.unwrap_or(spec.delta))?;
                let rows = gof_binned(&cv.predictions, &edges, GofScale::Transformed)?;
                write(out, "cv_gof.csv", &gof_to_csv(&rows)?)?;
                write(out, "cv_gof_plot.csv", &gof_plot_csv(&rows, "cross_validated")?)?;
            }
            let failed = cv.folds.iter().filter(|f| f.error.is_some()).count();
            if failed > 0 {
                Ok(Status::Numerical(format!("{failed} of {k} folds failed")))
            } else {
                Ok(Status::Ok)
            }
        }
        Command::ConvertStep { matrix, delta_star, fine_to_coarse, coarse_to_fine: to_fine, from_continuous, output } => {
            let a = read_matrix(matrix)?;
            let converted = if *from_continuous {
                influence_from_continuous(&a, *delta_star)?
            } else {
                let delta = cli.delta.ok_or_else(|| Error::InvalidParameter("--delta (fine step) is required".into()))?;
                let rho = step_ratio(delta, *delta_star)?;
                if *fine_to_coarse {
                    fine_to_coarse_const(&a, *delta_star, rho)?
                } else {
                    debug_assert!(*to_fine);
                    coarse_to_fine(&a, *delta_star, rho)?
                }
            };
            write(out, output, &matrix_csv(&converted)?)?;
            Ok(Status::Ok)
        }
        Command::Study { config } => {
            let mut cfg = StudyConfig::from_json(&read(config)?)?;
            if let Some(r) = cli.replicates {
                cfg.set_replicates(r);
            }
            if let Some(s) = cli.seed {
                cfg.set_seed(s);
            }
            let report = cfg.run(&fit_config(cli)?)?;
            write(out, "study.csv", &report.to_csv()?)?;
            write(out, "study.json", &serde_json::to_string_pretty(&report)?)?;
            Ok(Status::Ok)
        }
    }
}

/// Integer `rho` with `delta_star = rho * delta`.
pub fn step_ratio(delta: f64, delta_star: f64) -> Result<usize> {
    if !(delta > 0.0 && delta_star > 0.0 && delta.is_finite() && delta_star.is_finite()) {
        return Err(Error::InvalidParameter("steps must be positive".into()));
    }
    let r = delta_star / delta;
    let rho = r.round();
    if rho < 1.0 || (r - rho).abs() > 1e-9 * r {
        return Err(Error::InvalidParameter(format!("delta_star / delta = {r} is not a positive integer")));
    }
    Ok(rho as usize)
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| Error::data(format!("line {}: malformed number '{s}'", i + 1))))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Error::data(format!("{}: expected a non-empty square matrix", path.display())));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

pub fn matrix_csv(m: &DMatrix<f64>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|v| v.to_string()))?;
    }
    crate::prediction::finish(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_in(dir: &Path, args: &[&str]) -> i32 {
        let mut v = vec!["dynlatent".to_string()];
        v.extend(args.iter().map(|s| s.to_string()));
        v.push("--out-dir".into());
        v.push(dir.display().to_string());
        run(v)
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["dynlatent", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["dynlatent", "fit", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["dynlatent", "--help"]), EXIT_OK);
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(run_in(dir.path(), &["fit", "--data", "/nonexistent.csv", "--spec", "/nonexistent.json"]), EXIT_USAGE);
    }

    #[test]
    fn convert_step_zero_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("zero.csv");
        fs::write(&m, "0,0\n0,0\n").unwrap();
        let code = run_in(dir.path(), &["convert-step", "--matrix", m.to_str().unwrap(), "--from-continuous", "--delta-star", "1"]);
        assert_eq!(code, EXIT_OK);
        let out = read_matrix(&dir.path().join("converted.csv")).unwrap();
        assert_eq!(out, DMatrix::zeros(2, 2));
        // scalar example in both directions
        fs::write(&m, "-0.2\n").unwrap();
        let args = ["convert-step", "--matrix", m.to_str().unwrap(), "--fine-to-coarse", "--delta", "0.5", "--delta-star", "1"];
        assert_eq!(run_in(dir.path(), &args), EXIT_OK);
        let c = read_matrix(&dir.path().join("converted.csv")).unwrap();
        assert!((c[(0, 0)] + 0.19).abs() < 1e-12);
        // a coarse matrix with a negative eigenvalue of I + A has no real root
        fs::write(&m, "-1.5,0\n0,0\n").unwrap();
        let args = ["convert-step", "--matrix", m.to_str().unwrap(), "--coarse-to-fine", "--delta", "0.5", "--delta-star", "1"];
        assert_eq!(run_in(dir.path(), &args), EXIT_NUMERICAL);
        assert_eq!(run_in(dir.path(), &["convert-step", "--matrix", m.to_str().unwrap(), "--delta-star", "1"]), EXIT_USAGE);
    }

    #[test]
    fn step_ratio_checks_integrality() {
        assert_eq!(step_ratio(0.5, 1.0).unwrap(), 2);
        assert_eq!(step_ratio(0.001, 1.0).unwrap(), 1000);
        assert!(step_ratio(0.3, 1.0).is_err());
        assert!(step_ratio(2.0, 1.0).is_err());
    }
}
