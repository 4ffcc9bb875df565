use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn run(config: &str, dir: &Path, extra: &[&str]) -> i32 {
    let cfg = dir.join("config-input.json");
    std::fs::write(&cfg, config).unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_selfcon"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir)
        .args(extra)
        .status()
        .unwrap();
    status.code().unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn column(dir: &Path, file: &str, name: &str) -> Vec<f64> {
    let mut r = csv::Reader::from_path(dir.join(file)).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|rec| rec.unwrap()[idx].parse().unwrap()).collect()
}

const DOUBLING_UNCOUPLED: &str = r#"{
    "command": "fixed-point",
    "model": {"class": "expanding", "map": {"name": "doubling"},
              "coupling": {"kind": "product", "offset": 1.0, "amplitude": 0.1}, "delta": 0.0, "n": 64}
}"#;

#[test]
fn uncoupled_doubling_has_uniform_density() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(DOUBLING_UNCOUPLED, dir.path(), &[]), 0);
    let density = column(dir.path(), "density.csv", "value");
    assert_eq!(density.len(), 64);
    assert!(density.iter().all(|v| (v - 1.0).abs() < 1e-12));
    let m = manifest(dir.path());
    assert_eq!(m["status"], "ok");
    assert_eq!(m["exit_code"], 0);
    assert_eq!(m["command"], "fixed-point");
    assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(m["flags"]["converged"], true);
    assert_eq!(m["effective_config"]["output"]["directory"], dir.path().display().to_string());
    let rerun: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(rerun, m["effective_config"]);
    assert!(m["files"].as_array().unwrap().iter().any(|f| f == "density.csv"));
    assert!(dir.path().join("density.svg").exists());
}

#[test]
fn sine_difference_coupling_has_no_response() {
    // the uniform density is invariant for every coupling strength here
    let cfg = r#"{
        "command": "fd-response",
        "model": {"class": "expanding", "map": {"name": "doubling"}, "coupling": {"kind": "sine-difference"},
                  "deltas": [0.02, 0.01], "n": 128},
        "solver": {"method": "outer", "tol": 1e-12},
        "output": {"plots": false}
    }"#;
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(cfg, dir.path(), &[]), 0);
    for name in ["response", "quotient_0.02", "quotient_0.01"] {
        let col = column(dir.path(), "quotients.csv", name);
        assert!(col.iter().all(|v| v.abs() < 1e-8), "{name}: {:?}", col.iter().fold(0.0f64, |a, v| a.max(v.abs())));
    }
    assert!(!dir.path().join("fd.svg").exists());
}

const OPTIMAL: &str = r#"{
    "command": "optimal-coupling",
    "model": {"class": "expanding", "map": {"name": "perturbed-doubling", "eps": 0.1},
              "coupling": {"kind": "sine-difference"}, "n": 128},
    "params": {"optimization": {"degree": 3, "exponent": 2, "certificate_samples": 500,
                                "constraint": {"kind": "ball", "radius": 1.0}}},
    "output": {"plots": false}
}"#;

#[test]
fn optimal_coupling_writes_coefficients_and_certificate() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(OPTIMAL, dir.path(), &["--seed", "5"]), 0);
    let coeffs = column(dir.path(), "coefficients.csv", "coefficient");
    assert_eq!(coeffs.len(), 49);
    let surface = column(dir.path(), "surface.csv", "value");
    assert!(!surface.is_empty() && surface.iter().all(|v| v.is_finite()));
    let cert: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("certificate.json")).unwrap()).unwrap();
    assert_eq!(cert["samples"], 500);
    assert_eq!(cert["seed"], 5);
    assert_eq!(cert["dominates"], true);
    assert!(cert["best_sample"].as_f64().unwrap() <= cert["objective"].as_f64().unwrap());
}

#[test]
fn outputs_are_byte_identical_across_runs_and_thread_counts() {
    let sim = r#"{
        "command": "simulate",
        "model": {"class": "additive-noise-circle", "map": {"name": "doubling"}, "coupling": {"kind": "sine-difference"},
                  "noise": {"kind": "gaussian", "sigma": 0.05}, "delta": 0.1, "n": 128},
        "params": {"particles": {"agents": 10000, "burn_in": 20, "samples": 5, "bins": 32}},
        "output": {"seed": 3}
    }"#;
    let contraction = r#"{
        "command": "contraction-report",
        "model": {"class": "expanding", "map": {"name": "perturbed-doubling", "eps": 0.1},
                  "coupling": {"kind": "product", "offset": 1.0, "amplitude": 0.15}, "deltas": [0.02, 0.1], "n": 64},
        "params": {"contraction": {"n1_max": 4}}
    }"#;
    for (cfg, files) in [
        (sim, &["trajectory.csv", "histogram.csv", "histogram.svg"][..]),
        (contraction, &["contraction.csv", "critical.csv"][..]),
        (OPTIMAL, &["coefficients.csv", "surface.csv", "certificate.json"][..]),
    ] {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        assert_eq!(run(cfg, a.path(), &["--threads", "1"]), 0);
        assert_eq!(run(cfg, b.path(), &["--threads", "3"]), 0);
        for f in files {
            let x = std::fs::read(a.path().join(f)).unwrap();
            let y = std::fs::read(b.path().join(f)).unwrap();
            assert!(x == y, "{f} differs between runs");
        }
    }
}

#[test]
fn malformed_configs_exit_with_code_2_and_still_write_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let bad = DOUBLING_UNCOUPLED.replace("\"n\": 64", "\"n\": 64, \"grid\": 3");
    assert_eq!(run(&bad, dir.path(), &[]), 2);
    let m = manifest(dir.path());
    assert_eq!(m["status"], "error");
    assert_eq!(m["exit_code"], 2);
    assert!(m["error"].as_str().unwrap().contains("grid"));

    let missing = r#"{"command": "simulate", "model": {"class": "expanding", "n": 64}}"#;
    assert_eq!(run(missing, dir.path(), &[]), 2);
    let no_map = r#"{"command": "fixed-point", "model": {"class": "expanding", "n": 64}}"#;
    assert_eq!(run(no_map, dir.path(), &[]), 2);
}

#[test]
fn regime_violations_exit_with_code_3() {
    let cfg = DOUBLING_UNCOUPLED.replace("\"delta\": 0.0", "\"delta\": 20.0");
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&cfg, dir.path(), &[]), 3);
    assert_eq!(manifest(dir.path())["exit_code"], 3);
}

#[test]
fn unconverged_solves_exit_with_code_4() {
    let cfg = DOUBLING_UNCOUPLED
        .replace("\"delta\": 0.0", "\"delta\": 0.3")
        .replace("}\n}", "},\n    \"solver\": {\"max_iter\": 1, \"tol\": 1e-15}\n}");
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&cfg, dir.path(), &[]), 4, "{}", std::fs::read_to_string(dir.path().join("manifest.json")).unwrap());
}

#[test]
fn schema_is_printed_as_json() {
    let out = Command::new(env!("CARGO_BIN_EXE_selfcon")).arg("--print-schema").output().unwrap();
    assert!(out.status.success());
    let schema: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(schema["properties"]["command"]["enum"].as_array().unwrap().len(), 8);
}
