use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn subgeo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_subgeo")).args(args).env("SUBGEO_WORKERS", "2").output().expect("binary runs")
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn malformed_config_reports_position_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.json", "{\"chain\": \"x\",\n  \"study\": }");
    let o = subgeo(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2, column 12"), "{}", stderr(&o));
}

#[test]
fn missing_seed_exits_2_and_flag_supplies_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let cfg = write(dir.path(), "c.json", r#"{"chain":"three-state-default","study":"tail","reps":2000}"#);
    let o = subgeo(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("seed"));
    let o = subgeo(&["run", "--config", &cfg, "--seed", "4", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn corrupted_constant_is_caught_with_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let cfg = write(
        dir.path(),
        "c.json",
        r#"{"chain":"three-state-default","study":"tail","seed":3,"reps":20000,"test_hook":{"corrupt_constant":"kappa","factor":1e-12}}"#,
    );
    let o = subgeo(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("dominance violation"));
    let cert: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("certificate.json")).unwrap()).unwrap();
    assert!(!cert["violations"].as_array().unwrap().is_empty());
}

#[test]
fn unknown_hook_constant_is_invalid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"chain":"three-state-default","study":"tail","seed":3,"test_hook":{"corrupt_constant":"nope","factor":2}}"#);
    assert_eq!(subgeo(&["run", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn zoo_export_round_trips_through_validate() {
    let o = subgeo(&["zoo", "list", "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let list: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let names: Vec<String> = list.as_array().unwrap().iter().map(|e| e["name"].as_str().unwrap().to_owned()).collect();
    assert!(names.iter().any(|n| n.starts_with("house-of-cards(")));
    assert_eq!(names.len(), 6);
    let dir = tempfile::tempdir().unwrap();
    for name in ["three-state-default", "two-state(0.3,0.4)", "doubly-stochastic"] {
        let o = subgeo(&["zoo", "export", name]);
        assert_eq!(o.status.code(), Some(0), "{name}: {}", stderr(&o));
        let path = write(dir.path(), "chain.json", &String::from_utf8(o.stdout).unwrap());
        let v = subgeo(&["validate", &path]);
        assert_eq!(v.status.code(), Some(0), "{name}: {}", stderr(&v));
    }
    assert_eq!(subgeo(&["zoo", "export", "reflected-walk"]).status.code(), Some(2));
}

#[test]
fn validate_rejects_a_broken_chain() {
    let dir = tempfile::tempdir().unwrap();
    let o = subgeo(&["zoo", "export", "three-state-default"]);
    let mut doc: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    doc["epsilon"] = serde_json::json!(0.99);
    let path = write(dir.path(), "chain.json", &doc.to_string());
    assert_eq!(subgeo(&["validate", &path]).status.code(), Some(2));
    let path = write(dir.path(), "trunc.json", "{\"kernel\": [");
    let v = subgeo(&["validate", &path]);
    assert_eq!(v.status.code(), Some(2));
    assert!(stderr(&v).contains("line 1"));
}

#[test]
fn verify_all_writes_the_three_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let cfg = write(dir.path(), "c.json", r#"{"chain":"three-state-default","study":"verify-all","seed":11}"#);
    let o = subgeo(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("results.csv")).unwrap();
    assert!(csv.lines().count() > 1);
    let cert: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("certificate.json")).unwrap()).unwrap();
    assert_eq!(cert["study"], "verify-all");
    assert!(cert["violations"].as_array().unwrap().is_empty());
    assert!(fs::read_to_string(out.join("plot.svg")).unwrap().starts_with("<svg"));
}
