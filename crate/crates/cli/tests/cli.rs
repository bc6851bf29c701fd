use std::path::Path;
use std::process::{Command, Output};

fn nerfloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nerfloc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run nerfloc")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A configuration small enough to run every stage in seconds.
fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.json");
    let json = serde_json::json!({
        "seed": 3,
        "out_dir": dir.join("out"),
        "scene": { "train_views": 16, "query_views": 2, "image_size": 24 },
        "train": { "steps": 30, "rays_per_batch": 64, "samples_per_ray": 16 },
        "render": { "samples_per_ray": 16 },
        "partition": { "poses_per_field": 16 },
        "selection": { "budget": 6, "views": 2 },
        "projector": { "channels": [4, 8], "epochs": 1 },
        "coarse": { "k_spatial": 2, "k_orient": 1, "epochs": 1 },
        "localize": { "query_features": "oracle" }
    });
    std::fs::write(&path, serde_json::to_string_pretty(&json).unwrap()).unwrap();
    path
}

#[test]
fn config_prints_defaults_as_json() {
    let out = nerfloc(&["config"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).expect("config output is JSON");
    assert!(v.get("scene").is_some());
    assert!(v.get("localize").is_some());
}

#[test]
fn seed_override_reaches_every_stage() {
    let out = nerfloc(&["--seed", "42", "config"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["seed"], 42);
    assert_eq!(v["train"]["seed"], 42);
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{ "scene": { "train_veiws": 3 } }"#).unwrap();
    let out = nerfloc(&["--config", path.to_str().unwrap(), "config"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("train_veiws"), "{}", stderr(&out));
}

#[test]
fn stage_without_inputs_reports_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out = nerfloc(&["--config", config.to_str().unwrap(), "localize"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("localize"), "{}", stderr(&out));
}

#[test]
fn stages_run_in_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let config = config.to_str().unwrap();
    for stage in ["partition", "train", "select", "coarse", "localize", "evaluate"] {
        let out = nerfloc(&["--config", config, stage]);
        assert!(out.status.success(), "{stage}: {}", stderr(&out));
    }
    let report = dir.path().join("out").join("report.json");
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(v["queries"].as_array().unwrap().len(), 2);
}
