use std::path::Path;
use std::process::{Command, Output};

use mflab::harness::{self, Summary};

fn mflab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mflab")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn bundled_text(name: &str) -> &'static str {
    harness::bundled(name).unwrap()
}

#[test]
fn list_shows_every_suite() {
    let o = mflab(&["list"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 8);
    assert!(text.contains("functional_oracle"));
}

#[test]
fn describe_sections() {
    let o = mflab(&["describe", "model"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8(o.stdout).unwrap().contains("intensity_bound"));
    assert_eq!(code(&mflab(&["describe", "no_such_section"])), 2);
}

#[test]
fn oracle_suite_passes_and_summary_matches_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = mflab(&["functional_oracle", "--out", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("functional_oracle_rows.csv")).unwrap();
    let summary: Summary =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("functional_oracle_summary.json")).unwrap())
            .unwrap();
    let cfg = harness::load_config("bundled:functional_oracle").unwrap();
    let gates = harness::recompute_gates_from_csv(&cfg, &csv, summary.tol_scale).unwrap();
    assert_eq!(gates, summary.gates);
    assert_eq!(summary.config_hash, cfg.hash());
}

#[test]
fn single_particle_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = bundled_text("ito").replace(
        "levels = [\n    { n = 100, dt = 0.01 },\n    { n = 400, dt = 0.005 },\n    { n = 1600, dt = 0.0025 },\n]",
        "levels = [{ n = 1, dt = 0.01 }]",
    );
    assert!(text.contains("n = 1,"));
    let path = dir.path().join("one.toml");
    std::fs::write(&path, text).unwrap();
    let o = mflab(&["ito", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("at least 2 particles"));
}

#[test]
fn parse_errors_exit_2_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "suite = \"transport_oracle\"\n[oracle]\ncases = \"many\"\n").unwrap();
    let o = mflab(&["transport_oracle", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3") && err.contains("cases"), "{err}");

    std::fs::write(&path, "suite = \"mfc\"\nlevels = [{ h = 0.1 }]\n").unwrap();
    let o = mflab(&["mfc", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("[control]"));
}

#[test]
fn tight_tolerance_fails_the_gate() {
    let dir = tempfile::tempdir().unwrap();
    let o = mflab(&["transport_oracle", "--tol-scale", "1e-9", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8(o.stdout).unwrap().contains("FAIL transport_gap"));
}

#[test]
fn level_and_seed_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = mflab(&["mfc", "--levels", "0,2", "--seed", "9", "--jobs", "1", "--out", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(Path::new(out).join("mfc_rows.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(code(&mflab(&["mfc", "--levels", "7", "--out", out])), 2);
}

#[test]
fn value_tables_are_exported() {
    let dir = tempfile::tempdir().unwrap();
    let o = mflab(&["mfc", "--config", "bundled:mfc_jumps", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let table = std::fs::read_to_string(dir.path().join("mfc_jumps_values_L0.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("config_hash,time_index,configuration,value,argmax"));
    let cfg = harness::load_config("bundled:mfc_jumps").unwrap();
    assert!(lines.next().unwrap().starts_with(&format!("{},0,", cfg.hash())));
}
