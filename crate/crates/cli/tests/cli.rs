use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "[cutoff]\nvalue = \"12\"\nstep = 4\ntol = 1.0\n[scan]\nlo = -12.0\nhi = 0.0\nstep = 2.0\n";

fn kerr(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_kerr-dpt"));
    cmd.args(args).current_dir(dir);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn unknown_key_exits_1_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[model]\ndrvie = 3.0\n");
    let out = kerr(dir.path(), &["steady", "--config", &cfg], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("drvie"));
}

#[test]
fn bad_environment_override_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = kerr(dir.path(), &["steady"], &[("KERR_DPT_CUTOFF__VALUE", "many")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cutoff"));
}

#[test]
fn unconverged_auto_cutoff_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[cutoff]\nvalue = \"auto\"\nstart = 4\nstep = 2\nmax = 6\ntol = 1e-12\n[scan]\nlo = -12.0\nhi = 0.0\nstep = 2.0\n",
    );
    let out = kerr(dir.path(), &["steady", "--config", &cfg], &[]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn steady_writes_table_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = kerr(dir.path(), &["steady", "--config", &cfg, "--out", "o", "--threads", "1"], &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("o/steady.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("delta,n_st"));
    assert_eq!(lines.count(), 7);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("o/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["command"], "steady");
    assert_eq!(summary["cutoff"], 12);
    assert_eq!(summary["outputs"][0], "steady.csv");
}

#[test]
fn cutoff_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = kerr(dir.path(), &["steady", "--config", &cfg, "--cutoff", "10"], &[]);
    assert!(out.status.success());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["cutoff"], 10);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!("{SMALL}[sweep]\nengine = \"propagated\"\nsteps = 4\nstart = -8.0\nend = -4.0\n"),
    );
    for out in ["a", "b"] {
        let run = kerr(dir.path(), &["sweep", "--config", &cfg, "--out", out], &[]);
        assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    }
    let a = std::fs::read(dir.path().join("a/sweep.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/sweep.csv")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn meanfield_needs_no_cutoff_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = kerr(dir.path(), &["meanfield"], &[]);
    assert!(out.status.success());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/summary.json")).unwrap()).unwrap();
    let (lo, hi) = (
        summary["scalars"]["bistable_lower"].as_f64().unwrap(),
        summary["scalars"]["bistable_upper"].as_f64().unwrap(),
    );
    assert!(lo < -10.0 && hi > -10.0);
}
