use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(rel)
}

fn openhealth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_openhealth")).args(args).output().unwrap()
}

fn files_in(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn run_on_bundled_synthetic_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = data("synthetic/run.json");
    let o = openhealth(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let printed = String::from_utf8(o.stdout).unwrap();
    assert!(printed.lines().any(|l| l.ends_with("report.json")));

    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["seed"], 7);
    assert_eq!(report["clustering"]["k"], 3);
    let winner: Vec<&str> = report["selections"][0]["winner"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    for planted in ["x05", "x06", "x07"] {
        assert!(winner.contains(&planted), "{winner:?}");
    }
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = data("fixtures/run.json");
    let out = dir.path().join("o");
    let o = openhealth(&["-q", "run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "99"]);
    assert!(o.status.success());
    assert!(o.stdout.is_empty());
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 99);
}

#[test]
fn missing_response_column_exits_with_ingest_code() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(data("fixtures/run.json"))
        .unwrap()
        .replace("\"respiratory_visits\"", "\"asthma_rate\"");
    for f in ["neighborhoods.csv", "facilities.csv", "windrose.csv"] {
        std::fs::copy(data("fixtures").join(f), dir.path().join(f)).unwrap();
    }
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, text).unwrap();
    let out = dir.path().join("o");
    let o = openhealth(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(10));
    assert!(String::from_utf8_lossy(&o.stderr).contains("asthma_rate"));
    assert!(!out.exists());
}

#[test]
fn pollution_alone_writes_the_risk_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = data("fixtures/run.json");
    let out = dir.path().join("o");
    let common = ["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    assert!(openhealth(&[&["ingest"], &common[..]].concat()).status.success());
    let before = files_in(&out);
    let o = openhealth(&[&["pollution"], &common[..]].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let added: Vec<String> = files_in(&out).into_iter().filter(|f| !before.contains(f)).collect();
    // the fixture config tunes sigma, which adds the tuning record
    assert_eq!(added, vec!["pollution_risk.csv", "pollution_sigma.json"]);
}

#[test]
fn fit_writes_gamfit_and_one_curve_per_factor() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = data("fixtures/run.json");
    let out = dir.path().join("o");
    let common = ["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    for stage in ["ingest", "pollution"] {
        assert!(openhealth(&[&[stage], &common[..]].concat()).status.success());
    }
    let o = openhealth(&[&["fit"], &common[..], &["--factors", "immigrants,age_65_plus,industrial_pollution"]].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let fit: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("gamfit.json")).unwrap()).unwrap();
    assert_eq!(fit["factors"].as_array().unwrap().len(), 3);
    assert_eq!(
        files_in(&out.join("curves")),
        vec!["age_65_plus.csv", "immigrants.csv", "industrial_pollution.csv"]
    );
}

#[test]
fn missing_upstream_artifact_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = data("fixtures/run.json");
    let out = dir.path().join("o");
    let o = openhealth(&["scan", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(30));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("ingest.json") || err.contains("ingested.csv"), "{err}");
}

#[test]
fn bad_config_exits_with_code_two() {
    let o = openhealth(&["run", "--config", "/nonexistent/run.json"]);
    assert_eq!(o.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"inputs": {"synthetic": "s.json"}, "out_dir": "o"}"#).unwrap();
    let o = openhealth(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));
}

#[test]
fn stage_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = data("fixtures/run.json");
    let out = dir.path().join("o");
    let common = ["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    assert!(openhealth(&[&["run"], &common[..]].concat()).status.success());
    let before = std::fs::read(out.join("profiles.json")).unwrap();
    assert!(openhealth(&[&["cluster"], &common[..]].concat()).status.success());
    assert_eq!(std::fs::read(out.join("profiles.json")).unwrap(), before);
}
