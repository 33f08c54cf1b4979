//! TOML run configuration.
//!
//! ```toml
//! seed = 1
//! precision = 0.01
//!
//! [data]
//! source = "synthetic"   # or a directory of PNG/PPM images
//! images = 48
//! hr_size = 48
//! lr_patch = 12
//!
//! [model]
//! num_blocks = 2
//! channels = 16
//! scale = 2
//! candidate_bits = [4, 6, 8]
//! weight_bit = 8
//!
//! [pretrain]
//! epochs = 20
//! optimizer = "adam"
//!
//! [train]
//! epochs = 10
//! lr = 0.001
//! optimizer = "adam"
//! lambda = 0.01
//! selector_lr_scale = 10.0
//!
//! [finetune]
//! epochs = 5
//!
//! [lut]
//! strategy = "S1"
//! de = 10
//! beta = "auto"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{PatchDataset, SynthConfig};
use crate::edge::DEFAULT_PRECISION;
use crate::error::{CabmError, Result};
use crate::lut::{Beta, LutParams, Strategy};
use crate::supernet::SupernetSpec;
use crate::train::{OptimizerKind, Schedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `"synthetic"` or a directory of HR images.
    pub source: String,
    pub images: usize,
    pub hr_size: usize,
    pub lr_patch: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        DataConfig {
            source: "synthetic".into(),
            images: s.images,
            hr_size: s.hr_size,
            lr_patch: s.lr_patch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// `"sgd"` or `"adam"`.
    pub optimizer: String,
    pub momentum: f64,
    pub cosine: bool,
    pub lambda: f64,
    pub selector_lr_scale: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        let s = Schedule::default();
        ScheduleConfig {
            epochs: s.epochs,
            batch_size: s.batch_size,
            lr: s.lr,
            optimizer: "sgd".into(),
            momentum: 0.9,
            cosine: s.cosine,
            lambda: s.lambda,
            selector_lr_scale: s.selector_lr_scale,
        }
    }
}

impl ScheduleConfig {
    pub fn to_schedule(&self, seed: u64) -> Result<Schedule> {
        let optimizer = match self.optimizer.to_ascii_lowercase().as_str() {
            "sgd" => OptimizerKind::Sgd {
                momentum: self.momentum,
            },
            "adam" => OptimizerKind::adam(),
            other => return Err(CabmError::invalid(format!("unknown optimizer {other:?}"))),
        };
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(CabmError::invalid("batch_size and lr must be positive"));
        }
        Ok(Schedule {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            optimizer,
            cosine: self.cosine,
            lambda: self.lambda,
            selector_lr_scale: self.selector_lr_scale,
            seed,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LutConfig {
    pub strategy: String,
    pub de: u32,
    /// `"auto"` or a subinterval index.
    pub beta: String,
}

impl Default for LutConfig {
    fn default() -> Self {
        LutConfig {
            strategy: "S1".into(),
            de: 10,
            beta: "auto".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: f64,
    pub data: DataConfig,
    pub model: SupernetSpec,
    /// Fixed all-max-bit warm-up before joint training.
    pub pretrain: ScheduleConfig,
    pub train: ScheduleConfig,
    pub finetune: ScheduleConfig,
    pub lut: LutConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: crate::DEFAULT_SEED,
            precision: DEFAULT_PRECISION,
            data: DataConfig::default(),
            model: SupernetSpec {
                num_blocks: 2,
                scale: 2,
                ..SupernetSpec::default()
            },
            pretrain: ScheduleConfig {
                epochs: 20,
                optimizer: "adam".into(),
                lambda: 0.0,
                ..ScheduleConfig::default()
            },
            train: ScheduleConfig {
                epochs: 10,
                optimizer: "adam".into(),
                lambda: 0.01,
                selector_lr_scale: 10.0,
                ..ScheduleConfig::default()
            },
            finetune: ScheduleConfig {
                epochs: 5,
                optimizer: "adam".into(),
                lambda: 0.0,
                ..ScheduleConfig::default()
            },
            lut: LutConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            CabmError::parse(line, e.message().to_string())
        })?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CabmError::invalid(e.to_string()))
    }

    pub fn lut_params(&self) -> Result<LutParams> {
        Ok(LutParams {
            strategy: self.lut.strategy.parse::<Strategy>()?,
            precision: self.precision,
            de: self.lut.de,
            beta: self.lut.beta.parse::<Beta>()?,
            seed: self.seed,
        })
    }

    /// Builds the training patches named by `data.source`.
    pub fn dataset(&self) -> Result<PatchDataset> {
        if self.data.source == "synthetic" {
            let cfg = SynthConfig {
                images: self.data.images,
                hr_size: self.data.hr_size,
                scale: self.model.scale,
                lr_patch: self.data.lr_patch,
                seed: self.seed,
            };
            return PatchDataset::synthetic(&cfg, self.precision);
        }
        let images = load_image_dir(Path::new(&self.data.source))?;
        PatchDataset::from_images(&images, self.model.scale, self.data.lr_patch, self.precision)
    }
}

/// Every PNG/PPM/PGM image in `dir`, sorted by file name.
pub fn load_image_dir(dir: &Path) -> Result<Vec<crate::Tensor<f32>>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "ppm" | "pgm" | "pnm")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CabmError::invalid(format!("no images in {}", dir.display())));
    }
    paths.iter().map(crate::image_io::load_rgb).collect()
}
