use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn salab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_salab")).args(args).env("SALAB_WORKERS", "1").output().expect("spawn salab")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

// In regime: alpha = 4p/mu and K is the smallest admissible offset.
const SMALL: &str = r#"{
    "kind": "scbcd",
    "problem": {"type": "quadratic", "spectrum": [0.5, 0.75, 1.0, 1.0], "seed": 3, "blocks": [2, 2],
                "noise": {"c2": 0.5}},
    "schedule": {"alpha": 16, "K": 5632, "xi": 1},
    "steps": 50000, "n_seeds": 20, "base_seed": 11
}"#;

#[test]
fn missing_field_exits_2_and_names_it() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "bad.json", &SMALL.replace(r#""n_seeds": 20,"#, ""));
    let out = salab(&["run", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_seeds"));
}

#[test]
fn runs_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "small.json", SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(salab(&["run", &cfg, "--out", a.to_str().unwrap()]).status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_salab"))
        .args(["run", &cfg, "--out", b.to_str().unwrap()])
        .env("SALAB_WORKERS", "3")
        .output()
        .unwrap();
    assert!(out.status.success());
    for f in ["results.csv", "bounds.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["base_seed"], 11);
    assert_eq!(manifest["bound"]["in_regime"], true);
    assert_eq!(manifest["files"].as_array().unwrap().len(), 2);
}

#[test]
fn analyze_reads_saved_results() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "small.json", SMALL);
    let o = dir.path().join("o");
    assert!(salab(&["run", &cfg, "--out", o.to_str().unwrap()]).status.success());
    let out = salab(&["analyze", o.join("results.csv").to_str().unwrap(), "--fit-window", "20000:50000"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fit: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let slope = fit["slope"].as_f64().unwrap();
    assert!((-1.5..-0.5).contains(&slope), "slope {slope}");

    let bad = salab(&["analyze", o.join("results.csv").to_str().unwrap(), "--fit-window", "50000:20000"]);
    assert!(!bad.status.success());
}

#[test]
fn divergence_exits_3() {
    let dir = TempDir::new().unwrap();
    let text = SMALL.replace(r#""alpha": 16, "K": 5632, "xi": 1"#, r#""alpha": 50, "K": 2, "xi": 0"#);
    let cfg = write_config(dir.path(), "big.json", &text);
    let out = salab(&["run", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn fault_injection_fails_the_fast_suite() {
    let dir = TempDir::new().unwrap();
    let junit = dir.path().join("report.xml");
    let out = salab(&["accept", "fast", "--fault", "negate-delta", "--junit", junit.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().any(|l| l.contains("drift") && l.contains("FAIL")), "{stdout}");
    let xml = fs::read_to_string(junit).unwrap();
    assert!(xml.contains("failures=\"1\""), "{xml}");
}

#[test]
fn bundled_td_config_passes_the_rate_check() {
    let dir = TempDir::new().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/td_5state.json");
    let o = dir.path().join("o");
    let out = salab(&["run", cfg.to_str().unwrap(), "--out", o.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fit = salab(&["analyze", o.join("results.csv").to_str().unwrap(), "--fit-window", "100000:1000000"]);
    let fit: serde_json::Value = serde_json::from_slice(&fit.stdout).unwrap();
    let slope = fit["slope"].as_f64().unwrap();
    assert!((-1.3..=-0.7).contains(&slope) && fit["r_squared"].as_f64().unwrap() >= 0.9, "{fit}");
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(o.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["bound"].is_null());
    assert!(manifest["config_sha256"].as_str().unwrap().len() == 64);
}
