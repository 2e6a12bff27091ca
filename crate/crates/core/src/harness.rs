//! Experiment commands behind the CLI. Each command reads an
//! [`ExperimentConfig`], writes its artifacts under the output directory
//! and finishes with a JSON manifest.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use branchy_tensor::{read_checkpoint, write_checkpoint, ParamStore};
use serde::Serialize;

use crate::channel::ChannelConfig;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::latency::{write_curve_csv, write_plane_csv, AccuracyTable, Planner, SweepPoint};
use crate::model::{BranchyNet, Noise};
use crate::pointcloud::{build_dataset, read_cache, write_cache, Dataset, PointCloud};
use crate::training::{eval_noise, evaluate, evaluate_grid, EpochRecord, Stage, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_TRAINING: i32 = 3;
pub const EXIT_MISSING_ARTIFACT: i32 = 4;

pub const TRAIN_LOG: &str = "train_log.csv";
pub const ROBUSTNESS_CSV: &str = "robustness.csv";
pub const PLANE_CSV: &str = "latency_plane.csv";
pub const CURVE_CSV: &str = "latency_curve.csv";
pub const TRAIN_CACHE: &str = "dataset_train.bin";
pub const TEST_CACHE: &str = "dataset_test.bin";

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } | Error::Infeasible { .. } => EXIT_CONFIG,
            Error::Diverged { .. } | Error::StageOrder(_) => EXIT_TRAINING,
            Error::MissingArtifact(_) => EXIT_MISSING_ARTIFACT,
            Error::Tensor(_) | Error::Domain(_) | Error::Io { .. } => EXIT_FAILURE,
        }
    }
}

pub fn checkpoint_name(stage: Stage) -> String {
    format!("checkpoint_stage{}.bin", stage.index() + 1)
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    /// Sets the data seed to `s` and the channel seed to `s + 1`.
    pub seed: Option<u64>,
    pub paper_scale: bool,
}

/// The config at `path` (desk defaults when absent) with overrides applied.
pub fn resolve_config(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if overrides.paper_scale {
        cfg.apply_paper_scale();
    }
    if let Some(s) = overrides.seed {
        cfg.seeds.data = s;
        cfg.seeds.channel = s.wrapping_add(1);
    }
    if let Some(out) = &overrides.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses a comma-separated list of numbers such as `-5,0,5`.
pub fn parse_grid(text: &str, what: &str) -> Result<Vec<f64>> {
    let grid = text
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| Error::Config(format!("{what}: `{}` is not a number", t.trim()))))
        .collect::<Result<Vec<_>>>()?;
    if grid.iter().any(|v| v.is_nan()) {
        return Err(Error::Config(format!("{what}: NaN is not allowed")));
    }
    Ok(grid)
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_sha256: String,
    versions: Versions,
    seeds: crate::rng::Seeds,
    wall_clock_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    stage_seconds: Option<Vec<f64>>,
    outputs: Vec<String>,
}

#[derive(Serialize)]
struct Versions {
    branchy_gnn: &'static str,
    branchy_tensor: &'static str,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(Error::io(path))?))
}

fn prepare_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))
}

fn write_manifest(
    cfg: &ExperimentConfig,
    command: &str,
    started: Instant,
    stage_seconds: Option<Vec<f64>>,
    outputs: &[String],
) -> Result<PathBuf> {
    let manifest = Manifest {
        command,
        config_sha256: cfg.hash()?,
        versions: Versions { branchy_gnn: env!("CARGO_PKG_VERSION"), branchy_tensor: branchy_tensor::VERSION },
        seeds: cfg.seeds,
        wall_clock_s: started.elapsed().as_secs_f64(),
        stage_seconds,
        outputs: outputs.to_vec(),
    };
    let path = cfg.output_dir.join(format!("{command}_manifest.json"));
    let mut w = create(&path)?;
    serde_json::to_writer_pretty(&mut w, &manifest).map_err(|e| Error::Config(format!("manifest: {e}")))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(Error::io(&path))?;
    Ok(path)
}

fn fmt_acc(v: f64) -> String {
    format!("{v:.6}")
}

/// Writes the training log. Columns: `stage, epoch, loss, train_accuracy,
/// main_accuracy, branch1_accuracy, ...`; branch cells are empty while the
/// branches are untrained.
pub fn write_train_log<W: Write>(records: &[EpochRecord], branches: usize, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::Config(format!("writing training log: {e}"));
    let mut header: Vec<String> = ["stage", "epoch", "loss", "train_accuracy", "main_accuracy"].map(String::from).to_vec();
    header.extend((1..=branches).map(|b| format!("branch{b}_accuracy")));
    out.write_record(&header).map_err(csv_err)?;
    for r in records {
        let mut row = vec![r.stage.to_string(), r.epoch.to_string(), format!("{:.6}", r.loss), fmt_acc(r.train_accuracy), fmt_acc(r.main_accuracy)];
        row.extend(r.branch_accuracy.iter().map(|a| a.map(fmt_acc).unwrap_or_default()));
        out.write_record(&row).map_err(csv_err)?;
    }
    out.flush().map_err(Error::io(TRAIN_LOG))
}

pub struct TrainSummary {
    pub log: Vec<EpochRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub log_path: PathBuf,
    /// Wall-clock seconds per stage, in stage order.
    pub stage_seconds: Vec<f64>,
}

/// Runs the three stages, writing a checkpoint after each and the log at the end.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    let started = Instant::now();
    cfg.validate()?;
    prepare_dir(&cfg.output_dir)?;
    let data = build_dataset(&cfg.dataset, cfg.seeds.data)?;
    let (net, mut store) = BranchyNet::init(&cfg.model, data.num_classes, cfg.seeds.data)?;
    let mut trainer = Trainer::new(&net, &data, &cfg.training, cfg.channel, cfg.seeds)?;
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let mut stage_seconds = Vec::new();
    for stage in Stage::ORDER {
        let t = Instant::now();
        log.extend(trainer.run(stage, &mut store)?);
        stage_seconds.push(t.elapsed().as_secs_f64());
        let path = cfg.output_dir.join(checkpoint_name(stage));
        let mut w = create(&path)?;
        write_checkpoint(&store, &mut w)?;
        w.flush().map_err(Error::io(&path))?;
        checkpoints.push(path);
    }
    let log_path = cfg.output_dir.join(TRAIN_LOG);
    write_train_log(&log, net.branches.len(), create(&log_path)?)?;
    let mut outputs: Vec<String> = Stage::ORDER.iter().map(|s| checkpoint_name(*s)).collect();
    outputs.push(TRAIN_LOG.into());
    write_manifest(cfg, "train", started, Some(stage_seconds.clone()), &outputs)?;
    Ok(TrainSummary { log, checkpoints, log_path, stage_seconds })
}

/// Model and final parameters from the stage-3 checkpoint.
pub fn load_trained(cfg: &ExperimentConfig, num_classes: usize) -> Result<(BranchyNet, ParamStore<f32>)> {
    let path = cfg.output_dir.join(checkpoint_name(Stage::JointFineTune));
    if !path.is_file() {
        return Err(Error::MissingArtifact(path));
    }
    let (net, mut store) = BranchyNet::init(&cfg.model, num_classes, cfg.seeds.data)?;
    let file = File::open(&path).map_err(Error::io(&path))?;
    let saved = read_checkpoint(std::io::BufReader::new(file))?;
    store.load_from(&saved).map_err(|e| Error::Config(format!("{}: checkpoint does not match the model: {e}", path.display())))?;
    Ok((net, store))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessRow {
    /// `main` or `branch{b}`.
    pub exit: String,
    /// `None` for the noiseless evaluation.
    pub snr_db: Option<f64>,
    pub accuracy: f64,
}

/// Evaluates every exit of the trained model at each grid SNR (no
/// retraining) plus once over a noiseless link.
pub fn cmd_robustness(cfg: &ExperimentConfig, snr_grid: Option<&[f64]>) -> Result<Vec<RobustnessRow>> {
    let started = Instant::now();
    cfg.validate()?;
    let grid = snr_grid.unwrap_or(&cfg.robustness.snr_grid);
    if grid.iter().any(|s| s.is_nan()) {
        return Err(Error::Config("snr grid must hold numbers".into()));
    }
    let data = build_dataset(&cfg.dataset, cfg.seeds.data)?;
    let (net, store) = load_trained(cfg, data.num_classes)?;
    let channels: Vec<ChannelConfig> = grid.iter().map(|&s| cfg.channel.with_snr(s)).collect();
    let noisy = evaluate_grid(&net, &store, &data.test, &channels, eval_noise(&cfg.seeds))?;
    let clean = evaluate(&net, &store, &data.test, &cfg.channel, Noise::Off)?;
    let mut rows = Vec::new();
    for (b, _) in net.branches.iter().enumerate() {
        for (acc, &snr) in noisy.iter().zip(grid) {
            rows.push(RobustnessRow { exit: format!("branch{}", b + 1), snr_db: Some(snr), accuracy: acc.branches[b] });
        }
        rows.push(RobustnessRow { exit: format!("branch{}", b + 1), snr_db: None, accuracy: clean.branches[b] });
    }
    rows.push(RobustnessRow { exit: "main".into(), snr_db: None, accuracy: clean.main });

    prepare_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join(ROBUSTNESS_CSV);
    let mut out = csv::Writer::from_writer(create(&path)?);
    let csv_err = |e: csv::Error| Error::Config(format!("writing robustness CSV: {e}"));
    out.write_record(["exit", "snr_db", "accuracy"]).map_err(csv_err)?;
    for r in &rows {
        let snr = r.snr_db.map_or_else(|| "noiseless".to_string(), |s| s.to_string());
        out.write_record([r.exit.clone(), snr, fmt_acc(r.accuracy)]).map_err(csv_err)?;
    }
    out.flush().map_err(Error::io(&path))?;
    write_manifest(cfg, "robustness", started, None, &[ROBUSTNESS_CSV.into()])?;
    Ok(rows)
}

/// Latency sweep over bandwidths at the configured SNR. Accuracies come
/// from the trained model at that SNR, or are all 1 with `untrained`.
pub fn cmd_latency(cfg: &ExperimentConfig, bandwidth_grid: Option<&[f64]>, untrained: bool) -> Result<Vec<SweepPoint>> {
    let started = Instant::now();
    cfg.validate()?;
    let grid = bandwidth_grid.unwrap_or(&cfg.planner.bandwidth_grid);
    if grid.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(Error::Config("bandwidth grid must hold positive bandwidths".into()));
    }
    let num_classes = cfg.dataset.classes.len();
    let (net, accuracy) = if untrained {
        let (net, _) = BranchyNet::init(&cfg.model, num_classes, cfg.seeds.data)?;
        let table = AccuracyTable::uniform(1.0, net.branches.len());
        (net, table)
    } else {
        let (net, store) = load_trained(cfg, num_classes)?;
        let data = build_dataset(&cfg.dataset, cfg.seeds.data)?;
        let acc = evaluate(&net, &store, &data.test, &cfg.channel, eval_noise(&cfg.seeds))?;
        (net, AccuracyTable::from(&acc))
    };
    let planner = Planner::new(&net, cfg.dataset.points_per_cloud, cfg.device)?;
    let channels: Vec<ChannelConfig> = grid.iter().map(|&w| cfg.channel.with_bandwidth(w)).collect();
    let sweep = planner.sweep(&channels, &accuracy, cfg.planner.accuracy_floor)?;
    prepare_dir(&cfg.output_dir)?;
    write_plane_csv(&sweep, create(&cfg.output_dir.join(PLANE_CSV))?)?;
    write_curve_csv(&sweep, create(&cfg.output_dir.join(CURVE_CSV))?)?;
    write_manifest(cfg, "latency", started, None, &[PLANE_CSV.into(), CURVE_CSV.into()])?;
    Ok(sweep)
}

/// Generates the dataset and writes one cache file per split.
pub fn cmd_dataset_build(cfg: &ExperimentConfig) -> Result<Dataset> {
    let started = Instant::now();
    cfg.validate()?;
    let data = build_dataset(&cfg.dataset, cfg.seeds.data)?;
    prepare_dir(&cfg.output_dir)?;
    for (name, split) in [(TRAIN_CACHE, &data.train), (TEST_CACHE, &data.test)] {
        let path = cfg.output_dir.join(name);
        let mut w = create(&path)?;
        write_cache(split, &mut w)?;
        w.flush().map_err(Error::io(&path))?;
    }
    write_manifest(cfg, "dataset", started, None, &[TRAIN_CACHE.into(), TEST_CACHE.into()])?;
    Ok(data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheSummary {
    pub clouds: usize,
    pub points_per_cloud: usize,
    /// Clouds per label, indexed by label.
    pub per_label: Vec<usize>,
    pub max_radius: f64,
}

pub fn cmd_dataset_inspect(path: &Path) -> Result<CacheSummary> {
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let clouds: Vec<PointCloud> = read_cache(std::io::BufReader::new(File::open(path).map_err(Error::io(path))?))?;
    let labels = clouds.iter().map(|c| c.label + 1).max().unwrap_or(0);
    let mut per_label = vec![0; labels];
    for c in &clouds {
        per_label[c.label] += 1;
    }
    let max_radius = clouds
        .iter()
        .flat_map(|c| &c.points)
        .map(|p| p.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    Ok(CacheSummary { clouds: clouds.len(), points_per_cloud: clouds.first().map_or(0, PointCloud::len), per_label, max_radius })
}
