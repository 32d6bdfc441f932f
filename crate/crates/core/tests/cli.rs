use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_mdpm");

/// Small synthetic problem that still separates cleanly.
const CONFIG: &str = r#"{
    "mining": {"default": {"conf_min": 0.6}},
    "merge": {"threshold": 10},
    "n_per_class": 6,
    "synth": {"n_categories": 3, "train_images_per_category": 16, "test_images_per_category": 8, "patches_per_image": 30, "dimension": 128}
}"#;

fn run(workdir: &Path, config: Option<&Path>, args: &[&str]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.arg("--workdir").arg(workdir).env("RUST_LOG", "warn");
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn synth_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (w, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        let out = run(w, Some(&config), &["--seed", seed, "synth"]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let read = |w: &Path| fs::read(w.join("features/train.mdpm")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    assert_eq!(
        fs::read(a.join("features/plants.json")).unwrap(),
        fs::read(b.join("features/plants.json")).unwrap()
    );
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), r#"{"mining": {"default": {"conf_min": 1.5}}}"#);
    let out = run(dir.path(), Some(&bad), &["mine"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("conf_min"));

    let unknown = write_config(dir.path(), r#"{"kk": 3}"#);
    let out = run(dir.path(), Some(&unknown), &["mine"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));

    let out = run(dir.path(), None, &["--threads", "0", "mine"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn missing_artifacts_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), None, &["merge"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("ingest"), "{}", stderr(&out));

    let config = write_config(dir.path(), CONFIG);
    assert!(run(dir.path(), Some(&config), &["synth"]).status.success());
    let out = run(dir.path(), Some(&config), &["merge"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("mine"), "{}", stderr(&out));
}

#[test]
fn singular_background_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    // Without noise most dimensions never vary, and no ridge is added.
    let config = write_config(
        dir.path(),
        r#"{
            "mining": {"default": {"conf_min": 0.6}},
            "background": {"ridge": {"fixed": 0.0}},
            "synth": {"n_categories": 2, "train_images_per_category": 6, "test_images_per_category": 2, "patches_per_image": 10, "dimension": 32, "noise_active": 0}
        }"#,
    );
    for stage in ["synth", "mine"] {
        let out = run(dir.path(), Some(&config), &[stage]);
        assert!(out.status.success(), "{stage}: {}", stderr(&out));
    }
    let out = run(dir.path(), Some(&config), &["merge"]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    assert!(stderr(&out).contains("λ"), "{}", stderr(&out));
}

#[test]
fn study_prints_two_by_four_table() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    assert!(run(dir.path(), Some(&config), &["synth"]).status.success());
    let out = run(dir.path(), Some(&config), &["study"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let err = stderr(&out);
    let table: Vec<&str> = err.lines().filter(|l| l.starts_with("CNN-") || l.starts_with("representation")).collect();
    assert_eq!(table.len(), 3, "{err}");
    assert!(table[0].contains("k=10") && table[0].contains("k=100"));
    for row in &table[1..] {
        assert_eq!(row.matches('%').count(), 4, "{row}");
    }
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["sparsified"].as_array().unwrap().len(), 4);
    assert_eq!(report["binarized"].as_array().unwrap().len(), 4);
}

fn artifacts(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if !path.ends_with("config.json") {
                let name = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((name, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn pipeline_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    assert!(run(dir.path(), Some(&config), &["synth"]).status.success());
    let first = run(dir.path(), Some(&config), &["pipeline"]);
    assert!(first.status.success(), "{}", stderr(&first));
    let report: serde_json::Value = serde_json::from_slice(&first.stdout).unwrap();
    assert!(report["eval"]["accuracy"].as_f64().unwrap() >= 0.95, "{report}");
    let before = artifacts(dir.path());
    assert!(before.iter().any(|(n, _)| n.ends_with("model.json")));

    // Whole pipeline again, then single stages again.
    let second = run(dir.path(), Some(&config), &["pipeline"]);
    assert!(second.status.success());
    assert_eq!(first.stdout, second.stdout);
    assert_eq!(before, artifacts(dir.path()));
    for stage in ["mine", "merge", "select", "encode", "train", "eval"] {
        let out = run(dir.path(), Some(&config), &[stage]);
        assert!(out.status.success(), "{stage}: {}", stderr(&out));
    }
    assert_eq!(before, artifacts(dir.path()));
}
