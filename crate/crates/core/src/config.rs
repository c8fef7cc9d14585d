//! Experiment configuration, read from a TOML file with one table per
//! subsystem. Every field has a default, so an empty file is valid.
//!
//! ```toml
//! scenario = "4p4"
//! seed = 0
//!
//! [data]        # scene generator and split sizes
//! num_train = 480
//! num_test = 160
//! [data.scene]
//! canvas = 64
//!
//! [detector]    # architecture
//! widths = [8, 16, 32, 64]
//!
//! [train]       # optimisation, augmentation, evaluation
//! epochs = 30
//! [train.optim]
//! lr0 = 0.01
//!
//! [method]      # continual method and its hyper-parameters
//! method = "yolo-lwf"
//! memory_size = 50
//! [method.distill]
//! beta_reg = 320.0
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::continual::{MethodConfig, Scenario, TrainConfig};
use crate::data::SceneSpec;
use crate::detector::{DetectorConfig, GridSpec};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub scene: SceneSpec,
    pub num_train: usize,
    pub num_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            num_train: 480,
            num_test: 160,
        }
    }
}

/// Architecture settings; the class list comes from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub strides: Vec<usize>,
    pub widths: Vec<usize>,
    pub head_width: usize,
    pub reg_max: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let d = DetectorConfig::desk(Vec::new());
        Self {
            strides: d.grid.strides().to_vec(),
            widths: d.widths,
            head_width: d.head_width,
            reg_max: d.reg_max,
        }
    }
}

impl ArchConfig {
    pub fn detector_config(&self, image_size: usize, class_names: Vec<String>, init_seed: u64) -> Result<DetectorConfig> {
        let mut cfg = DetectorConfig::desk(class_names);
        cfg.grid = GridSpec::new(image_size, self.strides.clone())?;
        cfg.widths = self.widths.clone();
        cfg.head_width = self.head_width;
        cfg.reg_max = self.reg_max;
        cfg.num_classes = cfg.class_names.len();
        cfg.init_seed = init_seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scenario: String,
    pub seed: u64,
    pub data: DataConfig,
    pub detector: ArchConfig,
    pub train: TrainConfig,
    pub method: MethodConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: "4p4".into(),
            seed: 0,
            data: DataConfig::default(),
            detector: ArchConfig::default(),
            train: TrainConfig::default(),
            method: MethodConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Toml(t) => {
                let (line, column) = t
                    .span()
                    .map(|s| line_col(&text, s.start))
                    .unwrap_or((0, 0));
                Error::Parse {
                    path: path.display().to_string(),
                    line,
                    column,
                    message: t.message().to_string(),
                }
            }
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn scenario(&self) -> Result<Scenario> {
        self.scenario.parse()
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario()?;
        self.data.scene.validate()?;
        self.method.distill.validate()?;
        self.method.erd.validate()?;
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be ≥ 1"));
        }
        self.detector
            .detector_config(self.data.scene.canvas, self.data.scene.class_names(), 0)?;
        Ok(())
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}
