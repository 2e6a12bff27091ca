use branchy_gnn::config::ExperimentConfig;
use branchy_gnn::harness::{
    checkpoint_name, cmd_dataset_build, cmd_dataset_inspect, cmd_latency, cmd_robustness, cmd_train, parse_grid, resolve_config,
    Overrides, TEST_CACHE, TRAIN_LOG,
};
use branchy_gnn::latency::Strategy;
use branchy_gnn::model::BranchyNet;
use branchy_gnn::training::{Stage, Trainer};
use branchy_gnn::{pointcloud::build_dataset, Error};

fn tiny(dir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.output_dir = dir.to_path_buf();
    cfg.dataset.classes = vec!["sphere".into(), "cube".into(), "torus".into()];
    cfg.dataset.samples_per_class = 12;
    cfg.dataset.test_per_class = 4;
    cfg.dataset.points_per_cloud = 24;
    cfg.model.backbone.k = 4;
    for plan in [&mut cfg.training.main, &mut cfg.training.branches, &mut cfg.training.joint] {
        plan.epochs = 2;
    }
    cfg.planner.accuracy_floor = 0.0;
    cfg
}

#[test]
fn train_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = cmd_train(&tiny(a.path())).unwrap();
    cmd_train(&tiny(b.path())).unwrap();
    assert_eq!(first.log.len(), 6);
    assert_eq!(first.stage_seconds.len(), 3);
    for stage in Stage::ORDER {
        let name = checkpoint_name(stage);
        assert_eq!(std::fs::read(a.path().join(&name)).unwrap(), std::fs::read(b.path().join(&name)).unwrap(), "{name}");
    }
    assert_eq!(std::fs::read(a.path().join(TRAIN_LOG)).unwrap(), std::fs::read(b.path().join(TRAIN_LOG)).unwrap());

    let log = std::fs::read_to_string(a.path().join(TRAIN_LOG)).unwrap();
    let stage1: Vec<&str> = log.lines().filter(|l| l.starts_with("main_only")).collect();
    assert!(stage1.iter().all(|l| l.ends_with(",,,,")), "{stage1:?}");
}

#[test]
fn different_seed_changes_the_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    cmd_train(&tiny(a.path())).unwrap();
    let mut cfg = tiny(b.path());
    cfg.seeds.data = 99;
    cmd_train(&cfg).unwrap();
    let name = checkpoint_name(Stage::MainOnly);
    assert_ne!(std::fs::read(a.path().join(&name)).unwrap(), std::fs::read(b.path().join(&name)).unwrap());
}

#[test]
fn robustness_and_latency_after_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    assert!(matches!(cmd_robustness(&cfg, None), Err(Error::MissingArtifact(_))));
    cmd_train(&cfg).unwrap();

    let rows = cmd_robustness(&cfg, Some(&[0.0, 30.0])).unwrap();
    assert_eq!(rows.len(), 4 * 3 + 1);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.accuracy)));
    assert_eq!(rows.last().unwrap().exit, "main");

    let sweep = cmd_latency(&cfg, Some(&[100.0, 1e4, 1e9]), false).unwrap();
    assert_eq!(sweep.len(), 3);
    assert_eq!(sweep[2].chosen, Strategy::EdgeOnly);
    for name in ["robustness_manifest.json", "latency_manifest.json", "train_manifest.json"] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
}

#[test]
fn infeasible_floor_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.planner.accuracy_floor = 1.5;
    let err = cmd_latency(&cfg, None, true).unwrap_err();
    assert!(matches!(err, Error::Infeasible { .. }));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn stages_cannot_be_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let data = build_dataset(&cfg.dataset, cfg.seeds.data).unwrap();
    let (net, mut store) = BranchyNet::init(&cfg.model, data.num_classes, 1).unwrap();
    let mut trainer = Trainer::new(&net, &data, &cfg.training, cfg.channel, cfg.seeds).unwrap();
    let err = trainer.run(Stage::JointFineTune, &mut store).unwrap_err();
    assert!(matches!(err, Error::StageOrder(_)));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn dataset_cache_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let data = cmd_dataset_build(&cfg).unwrap();
    let summary = cmd_dataset_inspect(&dir.path().join(TEST_CACHE)).unwrap();
    assert_eq!(summary.clouds, data.test.len());
    assert_eq!(summary.per_label, vec![4, 4, 4]);
    assert_eq!(summary.points_per_cloud, 24);
    assert!(summary.max_radius <= 1.0 + 1e-6);
}

#[test]
fn overrides_and_grids() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, tiny(dir.path()).to_toml_string().unwrap()).unwrap();
    let out = dir.path().join("elsewhere");
    let cfg = resolve_config(Some(&path), &Overrides { out: Some(out.clone()), seed: Some(5), paper_scale: false }).unwrap();
    assert_eq!((cfg.seeds.data, cfg.seeds.channel), (5, 6));
    assert_eq!(cfg.output_dir, out);
    let paper = resolve_config(None, &Overrides { paper_scale: true, ..Overrides::default() }).unwrap();
    assert_eq!(paper.dataset.classes.len(), 40);

    assert_eq!(parse_grid("-5, 0,2.5", "g").unwrap(), vec![-5.0, 0.0, 2.5]);
    assert!(matches!(parse_grid("1,,2", "g"), Err(Error::Config(_))));
    assert!(matches!(resolve_config(Some(&dir.path().join("absent.toml")), &Overrides::default()), Err(Error::Config(_))));
}
