use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lmmsdp::io::{read_manifest, read_matrix_csv, MANIFEST_NAME};

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name).to_string_lossy().into_owned()
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmmsdp")).args(args).env_remove("LMMSDP_VERBOSE").output().unwrap()
}

fn out_dir(tmp: &tempfile::TempDir, name: &str) -> (PathBuf, String) {
    let p = tmp.path().join(name);
    let s = p.to_string_lossy().into_owned();
    (p, s)
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn calibrate_writes_matrix_duals_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let (dir, d) = out_dir(&tmp, "cal");
    let o = run(&["calibrate", "--data", &fixture("sydney.json"), "--objective", "min-trace", "--out-dir", &d]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let x = read_matrix_csv(&dir.join("x.csv")).unwrap();
    assert_eq!(x.dim(), 20);
    assert!(x.min_eigenvalue() >= -1e-8);
    let duals = json(&dir.join("duals.json"));
    let rows = duals["instruments"].as_array().unwrap();
    assert_eq!(rows.len(), 28);
    for r in rows {
        let (t, m) = (r["target"].as_f64().unwrap(), r["model"].as_f64().unwrap());
        assert!((t - m).abs() <= 1e-6 * t, "{r}");
        assert!(r["dual"].is_number());
    }
    let manifest = read_manifest(&dir.join(MANIFEST_NAME)).unwrap();
    assert_eq!(manifest.exit_code, 0);
    assert_eq!(manifest.inputs.len(), 1);
    let names: Vec<&str> = manifest.outputs.iter().map(|f| f.path.as_str()).collect();
    assert_eq!(names, vec!["x.csv", "duals.json"]);
}

#[test]
fn infeasible_quotes_exit_2_with_certificate() {
    let tmp = tempfile::tempdir().unwrap();
    let (dir, d) = out_dir(&tmp, "inc");
    let o = run(&["calibrate", "--data", &fixture("inconsistent.json"), "--out-dir", &d]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("infeasible"));
    assert!(o.stdout.is_empty());
    let cert = json(&dir.join("certificate.json"));
    assert_eq!(cert["status"], "infeasible");
    let entries = cert["certificate"].as_array().unwrap();
    assert_eq!(entries.len(), 29);
    let weight = |label: &str| entries.iter().find(|e| e["instrument"] == label).unwrap()["y"].as_f64().unwrap();
    // The conflict is between the 1Y caplet and its re-quote.
    assert!(weight("caplet 1Y").abs() > 0.0 && weight("1Yx1Y").abs() > 0.0);
    assert!((weight("caplet 1Y") + weight("1Yx1Y")).abs() < 1e-12);
    assert_eq!(read_manifest(&dir.join(MANIFEST_NAME)).unwrap().exit_code, 2);
}

#[test]
fn usage_and_parse_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, d) = out_dir(&tmp, "err");
    for args in [
        vec!["calibrate", "--data", &fixture("duplicate.json"), "--out-dir", &d],
        vec!["calibrate", "--bogus"],
        vec!["calibrate", "--data", "/definitely/not/here.json", "--out-dir", &d],
        vec!["calibrate", "--data", &fixture("sydney.json"), "--objective", "maximize-target", "--out-dir", &d],
        vec!["bounds", "--data", &fixture("sydney.json"), "--target", "5by5", "--out-dir", &d],
        vec!["bounds", "--data", &fixture("sydney.json"), "--target", "15x10", "--out-dir", &d],
        vec!["sensitivity", "--data", &fixture("caplets_only.json"), "--scenarios", &fixture("scenarios.json"), "--out-dir", &d],
        vec!["frobnicate"],
    ] {
        let o = run(&args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(!o.stderr.is_empty(), "{args:?}");
    }
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn bounds_target_and_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let (dir, d) = out_dir(&tmp, "b");
    let o = run(&["bounds", "--data", &fixture("sydney.json"), "--target", "4x3", "--out-dir", &d]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let b = json(&dir.join("bounds.json"));
    let (lo, hi) = (b["lower"]["vol"].as_f64().unwrap(), b["upper"]["vol"].as_f64().unwrap());
    assert!(0.0 < lo && lo < hi, "{lo} {hi}");
    assert!(b["market_vol"].is_null());

    let (dir, d) = out_dir(&tmp, "sweep");
    let o = run(&["bounds", "--data", &fixture("sydney.json"), "--sweep", "--format", "csv", "--out-dir", &d]);
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(dir.join("bounds_sweep.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "expiry,tenor,lower_vol,upper_vol,market_vol,calibrated,error");
    assert_eq!(lines.len(), 211);
    assert!(lines.iter().skip(1).all(|l| l.ends_with(',')), "no cell failed");
    assert!(!dir.join("bounds_sweep.json").exists());
}

#[test]
fn sensitivity_hedge_and_gamma_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let (dir, d) = out_dir(&tmp, "s");
    let o = run(&["sensitivity", "--data", &fixture("sydney.json"), "--format", "csv", "--out-dir", &d]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.join("sensitivity.csv")).unwrap();
    // Default scenarios: ±1 vol point on each of the 28 instruments.
    assert_eq!(text.lines().count(), 1 + 56);
    assert!(text.lines().nth(1).unwrap().starts_with("caplet 1Y +1vol,"));

    let (dir, d) = out_dir(&tmp, "h");
    let o = run(&["hedge", "--data", &fixture("sydney.json"), "--target", "5x5", "--direction", "upper", "--notional", "2", "--out-dir", &d]);
    assert_eq!(o.status.code(), Some(0));
    let h = json(&dir.join("hedge.json"));
    let legs = h[0]["portfolio"].as_array().unwrap();
    // 5Yx5Y is itself a calibration instrument: the hedge is two units of it.
    for leg in legs {
        let n = leg["notional"].as_f64().unwrap();
        let expect = if leg["instrument"] == "5Yx5Y" { 2.0 } else { 0.0 };
        assert!((n - expect).abs() < 1e-7, "{leg}");
    }

    let (dir, d) = out_dir(&tmp, "g");
    let o = run(&["gamma-hedge", "--gamma", &fixture("gamma.csv"), "--gammas", &fixture("gammas.csv"), "--sigma", &fixture("sigma.csv"), "--out-dir", &d]);
    assert_eq!(o.status.code(), Some(0));
    let g = json(&dir.join("gamma_hedge.json"));
    let (t, after, before) =
        (g["t"].as_f64().unwrap(), g["exposure_hedged"].as_f64().unwrap(), g["exposure_unhedged"].as_f64().unwrap());
    assert!((t - after).abs() < 1e-6 && after < before);
}

#[test]
fn verbose_flag_traces_iterations_on_stderr() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, d) = out_dir(&tmp, "v");
    let o = run(&["-v", "calibrate", "--data", &fixture("sydney.json"), "--out-dir", &d]);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.lines().next().unwrap().starts_with("iter   0"), "{err}");
    let quiet = run(&["calibrate", "--data", &fixture("sydney.json"), "--out-dir", &d]);
    assert!(quiet.stderr.is_empty());
}

#[test]
fn replay_reproduces_and_detects_changes() {
    let tmp = tempfile::tempdir().unwrap();
    let (dir, d) = out_dir(&tmp, "sim");
    let o = run(&["simulate", "--config", &fixture("experiment.json"), "--paths", "12", "--seed", "3", "--out-dir", &d]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = dir.join(MANIFEST_NAME);
    assert_eq!(read_manifest(&manifest).unwrap().seed, Some(3));
    let (_, r) = out_dir(&tmp, "replay");
    let o = run(&["replay", "--manifest", &manifest.to_string_lossy(), "--out-dir", &r]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("replay identical"));

    // A tampered digest is reported as a mismatch.
    let text = std::fs::read_to_string(&manifest).unwrap();
    let mut m: serde_json::Value = serde_json::from_str(&text).unwrap();
    m["outputs"][0]["sha256"] = serde_json::Value::String("0".repeat(64));
    let tampered = tmp.path().join("tampered.json");
    std::fs::write(&tampered, serde_json::to_string(&m).unwrap()).unwrap();
    let (_, r2) = out_dir(&tmp, "replay2");
    let o = run(&["replay", "--manifest", &tampered.to_string_lossy(), "--out-dir", &r2]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("pnl_report.json differs"));
}

#[test]
fn replay_refuses_changed_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("market.json");
    std::fs::copy(fixture("sydney.json"), &data).unwrap();
    let (dir, d) = out_dir(&tmp, "cal");
    assert_eq!(run(&["calibrate", "--data", &data.to_string_lossy(), "--out-dir", &d]).status.code(), Some(0));
    let text = std::fs::read_to_string(&data).unwrap().replace("14.3", "14.4");
    std::fs::write(&data, text).unwrap();
    let o = run(&["replay", "--manifest", &dir.join(MANIFEST_NAME).to_string_lossy()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("changed since the recorded run"));
}
