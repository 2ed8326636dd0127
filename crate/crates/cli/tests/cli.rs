use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rhf-ifc"));
    cmd.env_remove("RHF_IFC_OUTPUT_DIR");
    cmd
}

fn shipped(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    bin()
        .args(args)
        .arg(config)
        .arg("--output-dir")
        .arg(out)
        .arg("--threads")
        .arg("2")
        .output()
        .expect("binary runs")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).expect("artifact exists")).expect("valid JSON")
}

const SMALL_METAL: &str = r#"{
  "lattice": [[2, 0, 0], [0, 2, 0], [0, 0, 2]],
  "atoms": [{"frac": [0, 0, 0], "Z": 1}],
  "sigma": 0.5,
  "Ecut": 20.0,
  "kgrid": {"n": 4},
  "temperature": 0.1,
  "n_bands": 10,
  "qgrid": {"n": 6, "shifted": false},
  "potential": {"kind": "cosine", "amplitude": 0.5}
}"#;

const SMALL_INSULATOR: &str = r#"{
  "lattice": [[6.283185307179586, 0, 0], [0, 6.283185307179586, 0], [0, 0, 6.283185307179586]],
  "atoms": [{"frac": [0, 0, 0], "Z": 1}],
  "sigma": 1.0,
  "Ecut": 3.0,
  "kgrid": {"n": 2},
  "temperature": 0.0,
  "n_bands": 8,
  "qgrid": {"n": 2, "shifted": true},
  "potential": {"kind": "cosine", "amplitude": 1.0}
}"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn negative_cutoff_is_a_config_error_at_ecut() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(shipped("cosine_insulator.json"))
        .unwrap()
        .replace("\"Ecut\": 6.0", "\"Ecut\": -6.0");
    let cfg = write_config(dir.path(), &text);
    let out = run(&["scf"], &cfg, &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("/Ecut"), "stderr: {stderr}");
    assert!(!dir.path().join("out/ground_state.json").exists());
}

#[test]
fn scf_on_the_shipped_cosine_insulator_is_gapped() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["scf"], &shipped("cosine_insulator.json"), dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let gs = read_json(&dir.path().join("ground_state.json"));
    assert!(gs["gap"].as_f64().unwrap() > 0.0);
    assert_eq!(gs["dos"].as_f64().unwrap(), 0.0);
    assert!(gs["prescribed"].as_bool().unwrap());
}

#[test]
fn fit_decay_on_a_finite_temperature_run_reports_positive_rate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_METAL);
    let out_dir = dir.path().join("out");
    for step in ["scf", "chi0", "ifc", "fit-decay"] {
        let out = run(&[step], &cfg, &out_dir);
        assert!(out.status.success(), "{step}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let report = read_json(&out_dir.join("decay_report.json"));
    assert_eq!(report["regime"], "exponential");
    assert!(report["eta"].as_f64().unwrap() > 0.0);
    assert!(report["shells"].as_array().unwrap().len() >= 5);
}

#[test]
fn downstream_step_without_upstream_artifacts_names_the_missing_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_METAL);
    let out = run(&["ifc"], &cfg, &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("run `scf` first"), "stderr: {stderr}");

    let out = run(&["scf"], &cfg, &dir.path().join("out"));
    assert!(out.status.success());
    let out = run(&["ifc"], &cfg, &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("run `chi0` first"));
}

#[test]
fn screen_refuses_finite_temperature_ground_states() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_METAL);
    let out_dir = dir.path().join("out");
    assert!(run(&["scf"], &cfg, &out_dir).status.success());
    let out = run(&["screen"], &cfg, &out_dir);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn output_directory_can_be_set_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_INSULATOR);
    let target = dir.path().join("from_env");
    let out = bin()
        .arg("scf")
        .arg(&cfg)
        .env("RHF_IFC_OUTPUT_DIR", &target)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(target.join("ground_state.json").is_file());
    assert!(target.join("manifest.json").is_file());
}

#[test]
fn full_pipeline_twice_gives_identical_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_INSULATOR);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out_dir in [&a, &b] {
        let out = run(&["all"], &cfg, out_dir);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let ma = std::fs::read(a.join("manifest.json")).unwrap();
    let mb = std::fs::read(b.join("manifest.json")).unwrap();
    assert_eq!(ma, mb);
    let manifest = read_json(&a.join("manifest.json"));
    let names: Vec<&String> = manifest["artifacts"].as_object().unwrap().keys().collect();
    for expected in [
        "ground_state.json",
        "bands.csv",
        "chi0/index.json",
        "screening.json",
        "ifc.json",
        "ifc.csv",
        "decay_report.json",
    ] {
        assert!(names.iter().any(|n| n.as_str() == expected), "missing {expected}");
    }
}

#[test]
fn sweep_writes_one_row_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL_METAL.replace(
        "\"potential\"",
        "\"sweep\": {\"Ecut\": [16.0], \"n_k\": [3]},\n  \"potential\"",
    );
    let cfg = write_config(dir.path(), &text);
    let out_dir = dir.path().join("out");
    let out = run(&["sweep"], &cfg, &out_dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(out_dir.join("convergence.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4, "{table}");
    assert!(lines[0].starts_with("parameter,value,n_plane_waves"));
    assert!(lines[1].starts_with("base,"));
    assert!(lines[2].starts_with("Ecut,16"));
    assert!(lines[3].starts_with("n_k,3"));
}
