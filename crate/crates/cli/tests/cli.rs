use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn rcmlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rcmlab")).args(args).output().unwrap()
}

fn write_config(dir: &Path, doc: &Value) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, doc.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

fn line_env() -> Value {
    json!({"lattice": {"half_dims": 0, "full_dims": 1, "radius": 128, "boundary": "torus"}, "alpha": 1.0})
}

#[test]
fn negative_alpha_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &json!({"environment": line_env()}));
    let out = dir.path().join("out");
    let o = rcmlab(&["exit-times", "--config", &cfg, "--set", "environment.alpha=-0.5", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["errors"][0]["field"], "environment.alpha");
    assert!(!out.exists());
}

#[test]
fn sample_budget_is_a_resource_refusal() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &json!({"environment": line_env(), "params": {"r_grid": [4, 8], "nsamples": 1000}, "caps": {"sample_budget": 1500}}),
    );
    let out = dir.path().join("out");
    let o = rcmlab(&["exit-times", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn site_cap_is_a_resource_refusal() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &json!({"environment": line_env(), "caps": {"site_cap": 100}}));
    let out = dir.path().join("out");
    let o = rcmlab(&["heat-kernel", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn failed_hard_check_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &json!({"environment": line_env(), "params": {"r_grid": [4, 8], "nsamples": 2000, "exponent_tolerance": 1e-9}}),
    );
    let out = dir.path().join("out");
    let o = rcmlab(&["exit-times", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["pass"], false);
}

#[test]
fn same_seed_gives_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &json!({"environment": line_env(), "params": {"r_grid": [4, 8], "nsamples": 2000}, "seed": 3}));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = rcmlab(&["exit-times", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["exit_times.csv", "exit_cdf.csv", "results.json", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["params"]["nsamples"], 2000);
    assert_eq!(manifest["seeds"]["monte_carlo"], 3);
}

#[test]
fn bounds_plot_data_has_profile_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &json!({"environment": line_env(), "params": {"t_grid": [4, 8], "y_radius": 32, "y_step": 4, "refine": false}}),
    );
    let out = dir.path().join("out");
    let o = rcmlab(&["bounds-check", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let o = rcmlab(&["plot-data", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let bounds = std::fs::read_to_string(out.join("plot_bounds.csv")).unwrap();
    assert_eq!(bounds.lines().next(), Some("t,rho,p,phi,ratio"));
    assert!(bounds.lines().count() > 2);
    let tidy = std::fs::read_to_string(out.join("plot_data.csv")).unwrap();
    assert_eq!(tidy.lines().next(), Some("experiment,series,x,y,stderr"));
}

#[test]
fn llt_plot_data_has_error_curve() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &json!({"environment": {"lattice": {"half_dims": 0, "full_dims": 1, "radius": 8}, "alpha": 1.0}, "params": {"n_grid": [4, 8]}}),
    );
    let out = dir.path().join("out");
    let o = rcmlab(&["llt", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(rcmlab(&["plot-data", out.to_str().unwrap()]).status.code(), Some(0));
    let llt = std::fs::read_to_string(out.join("plot_llt.csv")).unwrap();
    assert_eq!(llt.lines().next(), Some("n,seed,sup_error"));
    assert_eq!(llt.lines().count(), 3);
}

#[test]
fn plot_data_lists_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = rcmlab(&["plot-data", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["missing"][0], "manifest.json");

    let manifest = json!({"experiment": "llt"});
    std::fs::write(dir.path().join("manifest.json"), manifest.to_string()).unwrap();
    let o = rcmlab(&["plot-data", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["missing"], json!(["llt.csv", "llt_median.csv"]));
}
