use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bsd2dtn")).args(args).output().unwrap()
}

fn write_config(dir: &Path, json: &str) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, json).unwrap();
    p
}

fn small(spectral: &str, extra: &str) -> String {
    format!(
        r#"{{
  "mesh": {{ "n": 2, "resolution": 10 }},
  "coefficients": {{
    "flat": {{ "kind": "metric" }},
    "also_flat": {{ "kind": "metric" }},
    "bumped": {{ "kind": "conformal", "expression": "1 + 0.1*bump(sqrt((x1-0.5)^2+(x2-0.5)^2)/0.3)" }}
  }},
  "spectral": {spectral}{extra}
}}"#
    )
}

fn run(dir: &Path, json: &str, cmd: &str) -> Output {
    let cfg = write_config(dir, json);
    let out = dir.join("out");
    bin(&["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), cmd])
}

#[test]
fn missing_config_is_a_usage_error() {
    let o = bin(&["eigs"]);
    assert_eq!(o.status.code(), Some(2));
    let o = bin(&["--config", "/nonexistent/config.json", "eigs"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_configs_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &small(r#"{ "K": 0 }"#, ""), "eigs");
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(dir.path(), &small(r#"{ "K": 5, "typo": 1 }"#, ""), "eigs");
    assert_eq!(o.status.code(), Some(2));
    // Command whose section is absent.
    let o = run(dir.path(), &small(r#"{ "K": 5 }"#, ""), "sweep");
    assert_eq!(o.status.code(), Some(2));
    let cfg = write_config(dir.path(), &small(r#"{ "K": 5 }"#, ""));
    let o = bin(&["--config", cfg.to_str().unwrap(), "--threads", "0", "eigs"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn dry_run_prints_the_plan_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &small(r#"{ "K": 5 }"#, ""), "--dry-run");
    // `--dry-run` is global; the subcommand still has to be given.
    assert_eq!(o.status.code(), Some(2));
    let cfg = write_config(dir.path(), &small(r#"{ "K": 5 }"#, ""));
    let out = dir.path().join("out");
    let o = bin(&["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--dry-run", "eigs"]);
    assert_eq!(o.status.code(), Some(0));
    let s = String::from_utf8(o.stdout).unwrap();
    assert!(s.contains("command: Eigs"));
    assert!(s.contains("eigensolve 'bumped' with K = 5"));
    assert!(s.contains("\"resolution\": 10"));
    assert!(!out.exists());
}

#[test]
fn eigs_writes_records_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &small(r#"{ "K": 8 }"#, ""), "eigs");
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("out");
    for name in ["flat", "also_flat", "bumped"] {
        assert!(out.join(format!("spectral_{name}.json")).exists());
        assert!(out.join(format!("spectral_{name}_psi.bsdm")).exists());
        assert!(out.join(format!("eigs_{name}.json")).exists());
    }
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.lines().all(|l| l.starts_with("[PASS]")));
}

#[test]
fn delta_of_identical_records_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let extra = r#",
  "metric": { "records": ["flat", "also_flat"], "p": 1.0, "q": 1.0 }"#;
    let o = run(dir.path(), &small(r#"{ "K": 12 }"#, extra), "delta");
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("out/delta.json")).unwrap()).unwrap();
    assert_eq!(r["measured"]["delta"], 0.0);
    assert_eq!(r["measured"]["delta_bar"], 0.0);
    assert_eq!(r["pass"], true);
}

#[test]
fn failing_check_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let extra = r#",
  "wave": { "coefficient": "flat", "profiles": [{ "power": 8, "window": 4 }], "tolerance": 1e-14 }"#;
    let o = run(dir.path(), &small(r#"{ "K": 30 }"#, extra), "wave");
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8(o.stdout).unwrap().contains("[FAIL]"));
}

#[test]
fn sweep_table_grows_with_eps() {
    let dir = tempfile::tempdir().unwrap();
    let extra = r#",
  "sweep": {
    "family": "potential",
    "which": { "type": "potential", "j": 0 },
    "eps": { "lo": 0.001, "hi": 0.1, "points": 4 },
    "modes": 16
  }"#;
    let o = run(dir.path(), &small(r#"{ "K": 5 }"#, extra), "sweep");
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("out/sweep_potential_potential_j0.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("eps,delta,"));
    let deltas: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(deltas.len(), 4);
    assert!(deltas.windows(2).all(|w| w[1] > w[0]), "{deltas:?}");
}

#[test]
fn seed_override_changes_sampled_reports() {
    let dir = tempfile::tempdir().unwrap();
    let extra = r#",
  "verify": { "checks": ["ui0"], "samples": 50 }"#;
    let cfg = write_config(dir.path(), &small(r#"{ "K": 5 }"#, extra));
    let read = |seed: &str| {
        let out = dir.path().join(format!("out{seed}"));
        let o = bin(&["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", seed, "verify"]);
        assert_eq!(o.status.code(), Some(0));
        std::fs::read(out.join("ui0.json")).unwrap()
    };
    assert_eq!(read("3"), read("3"));
    assert_ne!(read("3"), read("4"));
}
