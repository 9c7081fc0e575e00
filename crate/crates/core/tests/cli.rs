use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cvate(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cvate"))
        .args(args)
        .current_dir(cwd)
        .env_remove("CVC_SEED")
        .output()
        .unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn simulate(dir: &Path, extra: &[&str]) {
    let mut args = vec!["simulate", "--out-dir", "sim", "--seed", "7", "--n2", "500", "--n1", "3000"];
    args.extend_from_slice(extra);
    let out = cvate(&args, dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_writes_three_files_and_truth() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &[]);
    let sim = dir.path().join("sim");
    for f in ["o1.csv", "o2.csv", "truth.json", "provenance.json"] {
        assert!(sim.join(f).exists(), "{f}");
    }
    let truth = json(&sim.join("truth.json"));
    assert_eq!(truth["schema_version"], 1);
    assert_eq!(truth["true_ate"].as_f64().unwrap(), cvate::true_ate(&cvate::default_config()).unwrap());
    let o1 = fs::read_to_string(sim.join("o1.csv")).unwrap();
    assert_eq!(o1.lines().next().unwrap(), "z,y,x1,x2");
    assert_eq!(o1.lines().count(), 3001);
}

#[test]
fn unit_selection_keeps_everything() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &["--sel1", "1", "--sel0", "1"]);
    let truth = json(&dir.path().join("sim/truth.json"));
    assert_eq!(truth["keep_fraction"].as_f64().unwrap(), 1.0);
}

#[test]
fn seed_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_cvate"))
        .args(["simulate", "--out-dir", "env", "--n2", "50", "--n1", "50"])
        .current_dir(dir.path())
        .env("CVC_SEED", "7")
        .output()
        .unwrap();
    assert!(out.status.success());
    let prov = json(&dir.path().join("env/provenance.json"));
    assert_eq!(prov["config"]["seed"], 7);
    assert_eq!(prov["command"], "simulate");
}

#[test]
fn estimate_minimal_report() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &[]);
    let out = cvate(
        &["estimate", "--o1", "sim/o1.csv", "--o2", "sim/o2.csv", "--out-dir", "est", "--B", "2", "--timing"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&dir.path().join("est/report.json"));
    for key in ["tau2", "tau_cv", "gamma_hat", "v_hat", "coef", "var_tau2", "var_reduction", "var_proxy", "seed"] {
        assert!(r.get(key).is_some(), "missing {key}");
    }
    assert_eq!(r["replicates"], 2);
    assert_eq!(r["schema_version"], 1);
    assert!(r["warnings"].as_array().unwrap().iter().all(|w| w != "biased dataset used as validation"));
    let t = json(&dir.path().join("est/timing.json"));
    assert!(t["total_seconds"].as_f64().unwrap() >= 0.0);
}

#[test]
fn biased_validation_is_flagged() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &[]);
    let out = cvate(
        &["estimate", "--o1", "sim/o1.csv", "--o2", "sim/o1.csv", "--o2-biased", "--out-dir", "est", "--B", "5"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&dir.path().join("est/report.json"));
    assert!(r["warnings"].as_array().unwrap().iter().any(|w| w == "biased dataset used as validation"));
}

#[test]
fn failures_exit_nonzero_with_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = cvate(&["estimate", "--o1", "missing.csv", "--o2", "missing.csv", "--out-dir", "e"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: [load O2]"), "{err}");

    fs::write(dir.path().join("bad.csv"), "z,y,x1\n0,2,1\n").unwrap();
    let out = cvate(&["estimate", "--o1", "bad.csv", "--o2", "bad.csv", "--out-dir", "e"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-binary outcome at line 2"));

    // one stratum, every outcome 1 in O2
    fs::write(dir.path().join("flat.csv"), "z,y,x1\n0,1,0\n1,1,0\n0,1,0\n1,1,0\n").unwrap();
    let out = cvate(&["estimate", "--o1", "flat.csv", "--o2", "flat.csv", "--out-dir", "e"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[tau2]"));
    assert!(!dir.path().join("e/report.json").exists());
}

#[test]
fn invalid_config_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = cvate(&["simulate", "--out-dir", "s", "--sel0=-0.5"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sel0"));
    let out = cvate(&["estimate", "--o1", "a", "--o2", "b", "--out-dir", "s", "--B", "1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("replicates"));
    let out = cvate(&["scenario", "--kind", "sideways", "--out-dir", "s"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn scenario_kinds_hold_their_size() {
    let dir = tempfile::tempdir().unwrap();
    for (kind, col, value) in [("n1-fixed", 2, "10000"), ("n2-fixed", 3, "1000")] {
        let out = cvate(
            &["scenario", "--kind", kind, "--seeds", "2", "--B", "2", "--out-dir", kind, "--grid", "2500"],
            dir.path(),
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let csv = fs::read_to_string(dir.path().join(kind).join("scenario.csv")).unwrap();
        for line in csv.lines().skip(1) {
            assert_eq!(line.split(',').nth(col).unwrap(), value, "{line}");
        }
        let side = json(&dir.path().join(kind).join("scenario.json"));
        assert_eq!(side["schema_version"], 1);
        assert_eq!(side["spec"]["kind"], kind);
    }
}

#[test]
fn ratio_fixed_has_one_row_per_grid_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = cvate(
        &["scenario", "--kind", "ratio-fixed", "--seeds", "3", "--B", "3", "--grid", "300,400,500", "--out-dir", "r"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("r/scenario.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("ratio-fixed,300,3000,300,"));
}

#[test]
fn oracle_commands() {
    let dir = tempfile::tempdir().unwrap();
    let out = cvate(&["oracle", "true-ate"], dir.path());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["true_ate"].as_f64().unwrap(), 0.22001690369774912);
    let out = cvate(&["oracle", "marginal-or", "--a", "1", "--b", "5", "--gamma", "0", "--psi", "2.718281828459045"], dir.path());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["enumerated"].as_f64().unwrap() - 0.2310585786300049).abs() < 1e-15);
    let out = cvate(&["oracle", "marginal-or", "--a", "-1", "--b", "5", "--gamma", "0", "--psi", "1"], dir.path());
    assert!(!out.status.success());
}
