use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dynlatent(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynlatent"))
        .args(args)
        .arg("--out-dir")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}\n{}", out.status.code(), String::from_utf8_lossy(&out.stderr));
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn simulate_then_fit_reports_every_parameter() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&dynlatent(d, &["simulate", "--scenario", "s2", "--n", "512", "--seed", "7"]));
    let data = d.join("data.csv");
    let spec = d.join("spec.json");
    ok(&dynlatent(d, &["fit", "--data", data.to_str().unwrap(), "--spec", spec.to_str().unwrap()]));
    let table = String::from_utf8(read(d, "fit.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("parameter,estimate,se,z,p"));
    assert_eq!(lines.count(), 24);
    let meta: serde_json::Value = serde_json::from_slice(&read(d, "fit.json")).unwrap();
    assert_eq!(meta["n_params"], 24);
    assert_eq!(meta["converged"], true);
    assert!(meta["convergence"]["rdm"].as_f64().unwrap() < 1e-3);
    assert_eq!(meta["spec_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn fit_output_does_not_depend_on_threads() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&dynlatent(d, &["simulate", "--scenario", "s1", "--n", "150", "--seed", "3", "--missingness", "0.15,0.07"]));
    let data = d.join("data.csv");
    let spec = d.join("spec.json");
    let mut outputs = Vec::new();
    for threads in ["1", "4"] {
        let out = d.join(format!("t{threads}"));
        let o = Command::new(env!("CARGO_BIN_EXE_dynlatent"))
            .args(["fit", "--data", data.to_str().unwrap(), "--spec", spec.to_str().unwrap(), "--seed", "5"])
            .args(["--threads", threads, "--out-dir", out.to_str().unwrap()])
            .output()
            .unwrap();
        ok(&o);
        outputs.push((read(&out, "fit.csv"), read(&out, "fit.json")));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn simulate_is_reproducible_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = |sub: &str, seed: &str, threads: &str| {
        let out = d.join(sub);
        let o = Command::new(env!("CARGO_BIN_EXE_dynlatent"))
            .args(["simulate", "--scenario", "s1", "--n", "40", "--replicates", "3", "--seed", seed, "--threads", threads])
            .args(["--out-dir", out.to_str().unwrap()])
            .output()
            .unwrap();
        ok(&o);
        (1..=3).map(|i| read(&out, &format!("data_{i:04}.csv"))).collect::<Vec<_>>()
    };
    let a = run("a", "9", "1");
    let b = run("b", "9", "4");
    let c = run("c", "10", "1");
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_ne!(a[0], a[1]);
}

#[test]
fn predict_gof_and_cv_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&dynlatent(d, &["simulate", "--scenario", "s1", "--n", "120", "--seed", "2"]));
    let data = d.join("data.csv");
    let spec = d.join("spec.json");
    let (data, spec) = (data.to_str().unwrap(), spec.to_str().unwrap());
    ok(&dynlatent(d, &["fit", "--data", data, "--spec", spec]));
    let fit = d.join("fit.json");
    let fit = fit.to_str().unwrap();

    ok(&dynlatent(d, &["predict", "--fit", fit, "--data", data, "--ndraws", "200", "--seed", "1"]));
    let preds = String::from_utf8(read(d, "predictions.csv")).unwrap();
    // one row per observed value plus the header
    let data_rows = fs::read_to_string(d.join("data.csv")).unwrap().lines().count();
    assert_eq!(preds.lines().count(), data_rows);

    ok(&dynlatent(d, &["gof", "--fit", fit, "--data", data, "--scale", "natural", "--ndraws", "200", "--edges", "0,2,4,6"]));
    let gof = String::from_utf8(read(d, "gof.csv")).unwrap();
    assert_eq!(gof.lines().count(), 1 + 3 * 2);
    let plot = String::from_utf8(read(d, "gof_plot.csv")).unwrap();
    assert!(plot.starts_with("time_bin,marker,group,observed_mean,ci_lo,ci_hi,predicted_mean"));

    ok(&dynlatent(d, &["cv", "--data", data, "--spec", spec, "--k", "3", "--seed", "4"]));
    let folds = String::from_utf8(read(d, "cv_folds.csv")).unwrap();
    assert_eq!(folds.lines().count(), 4);
    let cv = String::from_utf8(read(d, "cv_predictions.csv")).unwrap();
    assert_eq!(cv.lines().count(), data_rows);
}

#[test]
fn refit_at_finer_steps_reports_comparable_aic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&dynlatent(d, &["simulate", "--scenario", "s2", "--n", "200", "--seed", "8"]));
    let data = d.join("data.csv");
    let spec = d.join("spec.json");
    let mut aic = Vec::new();
    for delta in ["0.5", "0.25"] {
        let out = d.join(delta);
        let o = Command::new(env!("CARGO_BIN_EXE_dynlatent"))
            .args(["fit", "--data", data.to_str().unwrap(), "--spec", spec.to_str().unwrap(), "--delta", delta])
            .args(["--out-dir", out.to_str().unwrap()])
            .output()
            .unwrap();
        ok(&o);
        let meta: serde_json::Value = serde_json::from_slice(&read(&out, "fit.json")).unwrap();
        assert_eq!(meta["spec"]["delta"].as_f64().unwrap().to_string(), delta);
        aic.push(meta["aic"].as_f64().unwrap());
    }
    // same data, same number of parameters: the two fits land close together
    assert!((aic[0] - aic[1]).abs() < 0.01 * aic[0].abs(), "{aic:?}");
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(dynlatent(d, &["fit", "--bogus"]).status.code(), Some(1));
    assert_eq!(dynlatent(d, &["nonsense"]).status.code(), Some(1));
    assert_eq!(dynlatent(d, &["fit", "--data", "nope.csv", "--spec", "nope.json"]).status.code(), Some(1));
    let help = dynlatent(d, &["--help"]);
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8_lossy(&help.stdout);
    for sub in ["fit", "simulate", "predict", "gof", "cv", "convert-step", "study"] {
        assert!(text.contains(sub), "help lacks {sub}");
    }
}

#[test]
fn convert_step_from_continuous_zero_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let m = d.join("zero.csv");
    fs::write(&m, "0,0\n0,0\n").unwrap();
    ok(&dynlatent(d, &["convert-step", "--matrix", m.to_str().unwrap(), "--delta-star", "1", "--from-continuous"]));
    let out = String::from_utf8(read(d, "converted.csv")).unwrap();
    let values: Vec<f64> = out.split([',', '\n']).filter(|s| !s.is_empty()).map(|s| s.parse().unwrap()).collect();
    assert_eq!(values, vec![0.0; 4]);
}

#[test]
fn study_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("study.json");
    fs::write(&cfg, r#"{"kind": "coverage", "scenario": "s1", "n_subjects": 100, "replicates": 2, "seed": 1}"#).unwrap();
    ok(&dynlatent(d, &["study", "--config", cfg.to_str().unwrap()]));
    let csv = String::from_utf8(read(d, "study.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 29);
}
