//! Experiment configuration: one TOML file, every section required, unknown
//! keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::ChannelConfig;
use crate::error::{Error, Result};
use crate::latency::{log_grid, DeviceProfile};
use crate::model::ModelConfig;
use crate::pointcloud::{DatasetSpec, ShapeFamily};
use crate::rng::Seeds;
use crate::training::TrainingPlan;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustnessConfig {
    pub snr_grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerConfig {
    pub bandwidth_grid: Vec<f64>,
    /// Strategies below this test accuracy are never chosen.
    pub accuracy_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub seeds: Seeds,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub channel: ChannelConfig,
    pub training: TrainingPlan,
    pub device: DeviceProfile,
    pub robustness: RobustnessConfig,
    pub planner: PlannerConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_dir: PathBuf::from("runs/desk"),
            seeds: Seeds::default(),
            dataset: DatasetSpec::default(),
            model: ModelConfig::default(),
            channel: ChannelConfig::default(),
            training: TrainingPlan::default(),
            device: DeviceProfile::default(),
            robustness: RobustnessConfig { snr_grid: vec![-5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 30.0] },
            planner: PlannerConfig { bandwidth_grid: log_grid(100.0, 1e6, 20), accuracy_floor: 0.8 },
        }
    }
}

impl ExperimentConfig {
    /// 40 classes (the eight families at five z-stretches), 1024 points,
    /// larger backbone and symbol counts.
    pub fn paper_scale() -> Self {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_paper_scale();
        cfg.output_dir = PathBuf::from("runs/paper");
        cfg
    }

    pub fn apply_paper_scale(&mut self) {
        self.dataset.classes = [1.0, 0.5, 0.75, 1.5, 2.0]
            .iter()
            .flat_map(|s| {
                ShapeFamily::ALL.iter().map(move |f| if *s == 1.0 { f.name().to_owned() } else { format!("{}@{s}", f.name()) })
            })
            .collect();
        self.dataset.points_per_cloud = 1024;
        self.model = ModelConfig::paper_scale();
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.channel.validate()?;
        self.training.validate()?;
        self.device.validate()?;
        if self.dataset.points_per_cloud <= self.model.backbone.k {
            return Err(Error::Config("dataset.points_per_cloud must exceed model.backbone.k".into()));
        }
        if self.robustness.snr_grid.iter().any(|s| s.is_nan()) {
            return Err(Error::Config("robustness.snr_grid must hold numbers".into()));
        }
        if self.planner.bandwidth_grid.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::Config("planner.bandwidth_grid must hold positive bandwidths".into()));
        }
        Ok(())
    }

    /// Parses and validates. Errors name the offending key path.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.message().trim_end().to_owned();
            if path == "." {
                Error::Config(msg)
            } else {
                Error::Config(format!("{path}: {msg}"))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serializing config: {e}")))
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml_string()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}
