use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gprc(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gprc"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_damped_data(dir: &Path) {
    let w = 11f64.sqrt() / 2.0;
    let mut csv = String::from("t,u\n");
    for i in 0..15 {
        let t = 3.0 * i as f64 / 14.0;
        csv.push_str(&format!("{t},{}\n", (-0.5 * t).exp() * (w * t).cos()));
    }
    fs::write(dir.join("data.csv"), csv).unwrap();
    fs::write(
        dir.join("op.json"),
        r#"{"terms": [{"coeff": 1, "orders": [2]}, {"coeff": 1, "orders": [1]}, {"coeff": 3, "orders": [0]}]}"#,
    )
    .unwrap();
    fs::write(dir.join("grid.csv"), "t\n0.5\n1.0\n1.5\n").unwrap();
}

#[test]
fn fit_then_predict() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_damped_data(d);
    fs::write(d.join("train.json"), r#"{"restarts": 3}"#).unwrap();
    ok(&gprc(
        &["fit", "--data", "data.csv", "--operator", "op.json", "--sigma-u2", "1e-4", "--fixed-noise", "--sigma-r2", "0.01", "--config", "train.json", "--out", "fit"],
        d,
    ));
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("fit/model.json")).unwrap()).unwrap();
    assert_eq!(doc["format"], "gprc-model");
    assert_eq!(doc["noise"]["sigma_r2"], 0.01);

    ok(&gprc(&["predict", "--model", "fit/model.json", "--grid", "grid.csv", "--targets", "0,1,2", "--half-width", "0.5", "--count", "5", "--out", "pred"], d));
    let text = fs::read_to_string(d.join("pred/predictions.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x_1,target,mean,variance"));
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 9);
    let w = 11f64.sqrt() / 2.0;
    for r in rows.iter().filter(|r| r[1] == "0") {
        let t: f64 = r[0].parse().unwrap();
        let mean: f64 = r[2].parse().unwrap();
        assert!((mean - (-0.5 * t).exp() * (w * t).cos()).abs() < 1e-2, "{r:?}");
        assert!(r[3].parse::<f64>().unwrap() >= 0.0);
    }
}

#[test]
fn bad_inputs_fail_with_messages() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_damped_data(d);
    let out = gprc(&["fit", "--data", "missing.csv"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.csv"));

    fs::write(d.join("cfg.json"), r#"{"no_such_key": 1}"#).unwrap();
    let out = gprc(&["experiment", "linear-ode", "--config", "cfg.json"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));

    let out = gprc(&["experiment", "heat-equation"], d);
    assert!(!out.status.success());
    let out = gprc(&["sweep", "linear-ode", "--axis", "colour", "--values", "1"], d);
    assert!(!out.status.success());
}

#[test]
fn experiment_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("cfg.json"), r#"{"n_obs": 12, "eval_points": 30, "restarts": 2, "extended": {"half_width": [1.0], "count": [11]}}"#)
        .unwrap();
    let stdout = ok(&gprc(&["experiment", "linear-ode", "--config", "cfg.json", "--seed", "3", "--out", "exp"], d));
    assert_eq!(stdout.lines().count(), 4);
    assert!(d.join("exp/data_seed3.csv").exists());
    assert!(d.join("exp/predictions_m0_seed3.csv").exists());
    let reports = fs::read_to_string(d.join("exp/reports.csv")).unwrap();
    let mut lines = reports.lines();
    assert_eq!(lines.next(), Some("scenario,method,seed,noise_var,sigma_r2,target,rmse"));
    assert_eq!(lines.count(), 4 * 4);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("exp/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["seed"], 3);
    assert_eq!(manifest["reports"].as_array().unwrap().len(), 4);

    // same seed, same numbers
    ok(&gprc(&["experiment", "linear-ode", "--config", "cfg.json", "--seed", "3", "--out", "again"], d));
    assert_eq!(reports, fs::read_to_string(d.join("again/reports.csv")).unwrap());
}

#[test]
fn picard_sweep_and_identify() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("cfg.json"), r#"{"n_obs": 20, "span": [0.0, 6.0], "eval_points": 40, "restarts": 2}"#).unwrap();
    let stdout = ok(&gprc(&["picard", "--iters", "2", "--config", "cfg.json", "--out", "pic"], d));
    assert!(stdout.contains("best iteration"));
    let hist = fs::read_to_string(d.join("pic/history.csv")).unwrap();
    assert!(hist.starts_with("iteration,nlml,residual_rmse\n0,"));
    assert!(hist.lines().count() >= 3);
    assert!(d.join("pic/predictions.csv").exists());

    let stdout = ok(&gprc(&["identify", "--mode", "gpr", "--config", "cfg.json", "--mu-step", "0.25", "--refine", "--out", "id"], d));
    assert!(stdout.starts_with("argmin mu = "));
    let loss = fs::read_to_string(d.join("id/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 6);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("id/report.json")).unwrap()).unwrap();
    assert_eq!(report["true_mu"], 0.5);
    assert_eq!(report["n_obs"], 20);

    fs::write(d.join("lin.json"), r#"{"n_obs": 12, "eval_points": 30, "restarts": 2}"#).unwrap();
    ok(&gprc(&["sweep", "linear-ode", "--axis", "width", "--values", "0.5,1.0", "--config", "lin.json", "--out", "sw"], d));
    let sweep = fs::read_to_string(d.join("sw/sweep.csv")).unwrap();
    assert!(sweep.starts_with("value,method,target,rmse\n"));
    assert_eq!(sweep.lines().count(), 1 + 2 * 4);
}
