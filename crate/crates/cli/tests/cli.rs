use std::path::Path;
use std::process::{Command, Output};

fn ablatron(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ablatron"))
        .args(args)
        .env("ABLATRON_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// Four sessions of 32x32 frames: trains in seconds.
fn small_config(dir: &Path, seed: u64) -> std::path::PathBuf {
    let path = dir.join("gen.json");
    let json = format!(r#"{{"sessions": 4, "frames_per_gesture": 3, "raw_side": 32, "seed": {seed}}}"#);
    std::fs::write(&path, json).unwrap();
    path
}

#[test]
fn gradcheck_passes_with_exit_zero() {
    let o = ablatron(&["gradcheck", "--seed", "0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("max relative error"));
}

#[test]
fn generate_is_byte_identical_for_one_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), 0);
    let (a, b) = (dir.path().join("a.mmb"), dir.path().join("b.mmb"));
    for out in [&a, &b] {
        let o = ablatron(&["generate", "--config", s(&config), "--seed", "7", "--out", s(out)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(dir.path().join("a.meta.json").exists());
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = ablatron(&["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    assert_eq!(ablatron(&["--help"]).status.code(), Some(0));
}

#[test]
fn invalid_config_values_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = ablatron(&["train", "--dataset", "x.mmb", "--out", s(dir.path()), "--folds", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("folds"), "{}", stderr(&o));
}

#[test]
fn missing_dataset_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.mmb");
    let o = ablatron(&["train", "--dataset", s(&missing), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("absent.mmb"));
}

#[test]
fn corrupt_dataset_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.mmb");
    std::fs::write(&bad, b"XXXX not a container").unwrap();
    let o = ablatron(&["train", "--dataset", s(&bad), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn experiment_then_evaluate_and_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.mmb");
    let config = small_config(dir.path(), 2);
    let o = ablatron(&["generate", "--config", s(&config), "--out", s(&data)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let out = dir.path().join("run");
    let run = [
        "--dataset", s(&data), "--out", s(&out), "--folds", "2", "--seed", "3", "--epochs", "1",
        "--regimes", "fixed:0,up-to:8",
    ];
    let o = ablatron(&[&["experiment"], &run[..]].concat());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary = String::from_utf8_lossy(&o.stdout);
    assert!(summary.contains("up-to:8"), "{summary}");
    let first = std::fs::read(out.join("results.csv")).unwrap();

    // evaluating the stored models again reproduces the results exactly
    let o = ablatron(&[&["evaluate"], &run[..]].concat());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(std::fs::read(out.join("results.csv")).unwrap(), first);

    let rendered = dir.path().join("rendered");
    let o = ablatron(&["report", "--report", s(&out.join("report.json")), "--out", s(&rendered)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(std::fs::read(rendered.join("results.csv")).unwrap(), first);

    let o = ablatron(&["report", "--report", s(&out.join("report.json")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn evaluate_without_models_names_the_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.mmb");
    let config = small_config(dir.path(), 1);
    assert_eq!(ablatron(&["generate", "--config", s(&config), "--out", s(&data)]).status.code(), Some(0));
    let o = ablatron(&[
        "evaluate", "--dataset", s(&data), "--out", s(dir.path()), "--folds", "2", "--seed", "3",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("models"), "{}", stderr(&o));
}
