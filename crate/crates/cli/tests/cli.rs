use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn nlfrac(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nlfrac"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn data_rows(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    text.lines().filter(|l| !l.starts_with('#')).skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

const SMALL: &str = "[grid]\nn = 32\n";

#[test]
fn forward_with_minimal_config_writes_solution() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let o = nlfrac(&["forward", "--config", &cfg, "--out", "run"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    for name in ["solution.csv", "data.csv", "forward.json"] {
        assert!(tmp.path().join("run").join(name).exists(), "{name} missing");
    }
    let head = fs::read_to_string(tmp.path().join("run/solution.csv")).unwrap();
    assert!(head.starts_with("# nlfrac "));
    assert!(head.contains("# command: forward"));
    assert!(head.contains("# config_sha256: "));
    assert!(head.contains("# seed: 0"));
}

#[test]
fn malformed_config_exits_one() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "[grid\nn = 32\n");
    let o = nlfrac(&["forward", "--config", &cfg, "--out", "run"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("error:"), "{}", stderr(&o));

    let cfg = write_config(tmp.path(), "[grid]\nsize = 32\n");
    let o = nlfrac(&["forward", "--config", &cfg, "--out", "run"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("size"), "{}", stderr(&o));
}

#[test]
fn invalid_parameters_exit_one() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "[params]\ns = -1.0\n");
    let o = nlfrac(&["forward", "--config", &cfg, "--out", "run"], tmp.path());
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn large_data_warns_but_succeeds() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "[grid]\nn = 32\n[solver]\neps0 = 0.01\n[data]\namplitude = 0.05\n");
    let o = nlfrac(&["forward", "--config", &cfg, "--out", "run"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("outside contraction regime"), "{}", stderr(&o));
}

#[test]
fn remainder_slope_matches_order() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let o = nlfrac(&["remainder", "--config", &cfg, "--out", "run"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = data_rows(&tmp.path().join("run/remainder.csv"));
    assert_eq!(rows.len(), 5);
    let slope: f64 = rows[0][4].parse().unwrap();
    assert!(slope >= 2.8, "slope {slope}");
}

#[test]
fn oracle_recovery_is_accurate() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let o = nlfrac(&["recover", "--mode", "oracle", "--config", &cfg, "--out", "run"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("run/recovery.json")).unwrap()).unwrap();
    let report = &doc["report"];
    assert!(report["q_error"].as_f64().unwrap() <= 1e-5);
    let coefficients = report["coefficients"].as_array().unwrap();
    assert!(!coefficients.is_empty());
    for c in coefficients {
        assert!(c["relative_error"].as_f64().unwrap() <= 1e-5, "{c}");
    }
    let levels = data_rows(&tmp.path().join("run/recovery_levels.csv"));
    assert_eq!(levels.len(), coefficients.len() + 1);
}

#[test]
fn selfcheck_passes() {
    let tmp = TempDir::new().unwrap();
    let o = nlfrac(&["selfcheck", "--out", "run"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().any(|l| l.starts_with("PASS")));
    assert!(!text.lines().any(|l| l.starts_with("FAIL")), "{text}");
}

#[test]
fn runs_are_deterministic() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    for dir in ["a", "b"] {
        let o = nlfrac(&["linearize", "--config", &cfg, "--out", dir], tmp.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let mut names: Vec<_> = fs::read_dir(tmp.path().join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(!names.is_empty());
    for name in names {
        let a = fs::read(tmp.path().join("a").join(&name)).unwrap();
        let b = fs::read(tmp.path().join("b").join(&name)).unwrap();
        assert_eq!(a, b, "{name:?} differs");
    }
}

#[test]
fn seed_flag_changes_header() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    for (dir, seed) in [("a", "0"), ("b", "7")] {
        let o = nlfrac(&["forward", "--config", &cfg, "--out", dir, "--seed", seed], tmp.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = fs::read_to_string(tmp.path().join("a/forward.json")).unwrap();
    let b = fs::read_to_string(tmp.path().join("b/forward.json")).unwrap();
    let hash = |s: &str| serde_json::from_str::<serde_json::Value>(s).unwrap()["header"]["config_sha256"].clone();
    assert_ne!(hash(&a), hash(&b));
    assert!(b.contains("\"seed\": 7"));
}

#[test]
fn unwritable_output_exits_three() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("blocker"), "").unwrap();
    let o = nlfrac(&["forward", "--out", "blocker/run"], tmp.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}
