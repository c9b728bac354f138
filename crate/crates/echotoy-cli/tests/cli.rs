//! Exit-code and wiring checks for the `echotoy` binary.

use std::fs;
use std::path::Path;
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_echotoy");

/// A config the binary can execute in well under a second per stage.
const MINI_CONFIG: &str = "\
[data]
train = 6
val = 4
test = 2
frames = 4

[avae]
base_channels = 4
disc_channels = 4
steps = 30
batch = 4

[lifm]
channels = 8
steps = 20
batch = 4

[lvfm]
channels = 8
steps = 20
batch = 2

[sampler]
steps = 4
video_lambda = 1

[reid]
dim = 8
channels = 4
steps = 30
batch = 4
pairs = 30

[synthesize]
pool_factor = 2

[ef]
channels = 4
epochs = 2
batch = 4

[run]
seed = 5
";

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("mini.cfg");
    fs::write(&path, MINI_CONFIG).unwrap();
    path
}

#[test]
fn usage_errors_exit_1() {
    let out = Command::new(BIN).arg("--no-such-flag").output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    let out = Command::new(BIN).output().unwrap(); // missing subcommand
    assert_eq!(out.status.code(), Some(1));

    // Unreadable config file.
    let out = Command::new(BIN)
        .args(["gen-data", "--config", "/nonexistent/x.cfg", "--out", "/tmp/unused-echotoy"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // Invalid config contents.
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "[data]\ntrain = -3\n").unwrap();
    let out = Command::new(BIN)
        .args(["gen-data"])
        .arg("--config")
        .arg(&bad)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    let help = Command::new(BIN).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
}

#[test]
fn missing_upstream_artifacts_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = Command::new(BIN)
        .args(["encode"])
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("missing artifact"), "{stderr}");
    assert!(stderr.contains("train-avae"), "{stderr}");
}

#[test]
fn stages_run_and_seed_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_dir = dir.path().join("out");
    let run = |args: &[&str]| {
        Command::new(BIN)
            .args(args)
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(&out_dir)
            .output()
            .unwrap()
    };
    let out = run(&["gen-data"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("real-train.etd").exists());
    assert!(out_dir.join("manifest.json").exists());

    // A different --seed re-hashes the config, so the directory is stale...
    let out = run(&["gen-data", "--seed", "99"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("stale artifact"), "{stderr}");

    // ...unless forced.
    let out = run(&["gen-data", "--seed", "99", "--force"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn e2e_honors_stage_cutoff() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_dir = dir.path().join("out");
    let out = Command::new(BIN)
        .args(["e2e", "--stage", "train-avae"])
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("avae.ckpt").exists());
    assert!(!out_dir.join("latents-train.elat").exists());

    let out = Command::new(BIN)
        .args(["e2e", "--stage", "nosuch"])
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
