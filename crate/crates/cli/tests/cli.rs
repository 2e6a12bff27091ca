use std::path::Path;
use std::process::{Command, Output};

use branchy_gnn::config::ExperimentConfig;
use branchy_gnn::harness::{EXIT_CONFIG, EXIT_MISSING_ARTIFACT, EXIT_TRAINING};
use branchy_gnn::training::StagePlan;

fn branchy(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_branchy")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn tiny(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.output_dir = dir.to_path_buf();
    cfg.dataset.classes = vec!["sphere".into(), "torus".into()];
    cfg.dataset.samples_per_class = 10;
    cfg.dataset.test_per_class = 3;
    cfg.dataset.points_per_cloud = 32;
    cfg.planner.accuracy_floor = 0.0;
    for plan in [&mut cfg.training.main, &mut cfg.training.branches, &mut cfg.training.joint] {
        plan.epochs = 1;
    }
    cfg
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> String {
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml_string().unwrap()).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn missing_field_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    let text = tiny(dir.path()).to_toml_string().unwrap().replace("momentum = 0.9\n", "");
    std::fs::write(&path, text).unwrap();
    let out = branchy(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), EXIT_CONFIG);
    assert!(String::from_utf8_lossy(&out.stderr).contains("momentum"));
}

#[test]
fn unknown_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    let text = tiny(dir.path()).to_toml_string().unwrap().replace("[seeds]\n", "[seeds]\nnoise = 4\n");
    std::fs::write(&path, text).unwrap();
    let out = branchy(&["dataset", "build", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), EXIT_CONFIG);
    assert!(String::from_utf8_lossy(&out.stderr).contains("noise"));
}

#[test]
fn bad_grid_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = branchy(&["latency", "--untrained", "--out", dir.path().to_str().unwrap(), "--bandwidth-grid", "100,abc"]);
    assert_eq!(code(&out), EXIT_CONFIG);
    let out = branchy(&["latency", "--untrained", "--out", dir.path().to_str().unwrap(), "--bandwidth-grid", "100,-3"]);
    assert_eq!(code(&out), EXIT_CONFIG);
}

#[test]
fn missing_checkpoint_exits_with_artifact_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = branchy(&["robustness", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), EXIT_MISSING_ARTIFACT);
    let out = branchy(&["latency", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), EXIT_MISSING_ARTIFACT);
    let out = branchy(&["dataset", "inspect", dir.path().join("absent.bin").to_str().unwrap()]);
    assert_eq!(code(&out), EXIT_MISSING_ARTIFACT);
}

#[test]
fn divergence_exits_with_training_code() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.training.main = StagePlan { epochs: 2, learning_rate: 1e30 };
    let config = write_config(dir.path(), &cfg);
    let out = branchy(&["train", "--config", &config]);
    assert_eq!(code(&out), EXIT_TRAINING, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn untrained_latency_writes_csvs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = branchy(&["latency", "--untrained", "--out", dir.path().to_str().unwrap(), "--bandwidth-grid", "100,1e4,1e6"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("branch_1") && stdout.contains("edge_only"), "{stdout}");
    for name in ["latency_plane.csv", "latency_curve.csv", "latency_manifest.json"] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
    let manifest = std::fs::read_to_string(dir.path().join("latency_manifest.json")).unwrap();
    assert!(manifest.contains("config_sha256") && manifest.contains("branchy_tensor"));
}

#[test]
fn dataset_build_then_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &tiny(dir.path()));
    let out = branchy(&["dataset", "build", "--config", &config]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = branchy(&["dataset", "inspect", dir.path().join("dataset_test.bin").to_str().unwrap()]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("clouds 6") && stdout.contains("points per cloud 32"), "{stdout}");
}

#[test]
fn train_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &tiny(dir.path()));
    let out = branchy(&["train", "--config", &config, "--seed", "7"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["checkpoint_stage1.bin", "checkpoint_stage2.bin", "checkpoint_stage3.bin", "train_log.csv", "train_manifest.json"] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.starts_with("stage,epoch,loss,train_accuracy,main_accuracy,branch1_accuracy"));

    let out = branchy(&["robustness", "--config", &config, "--seed", "7", "--snr-grid", "-5,20"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("robustness.csv")).unwrap();
    // four branches at two SNRs plus a noiseless row each, then the main exit
    assert_eq!(csv.lines().count(), 1 + 4 * 3 + 1);

    let out = branchy(&["latency", "--config", &config, "--seed", "7", "--bandwidth-grid", "1e3,1e6"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(dir.path().join("latency_curve.csv")).unwrap().lines().count(), 3);
}
