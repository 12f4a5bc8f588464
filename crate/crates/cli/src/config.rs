//! Run configuration read from TOML.

use std::path::{Path, PathBuf};

use hodinet_core::encoders::StageContract;
use hodinet_core::train::TrainConfig;
use hodinet_core::{FusionVariant, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    WithoutHosf,
    WithoutHocf,
    Swapped,
}

impl From<Variant> for FusionVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Full => FusionVariant::Full,
            Variant::WithoutHosf => FusionVariant::WithoutHosf,
            Variant::WithoutHocf => FusionVariant::WithoutHocf,
            Variant::Swapped => FusionVariant::Swapped,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    /// Multiplier applied to the learning rate after every epoch.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: 1e-4,
            lr_decay: 0.9,
            batch_size: 4,
            epochs: 100,
            steps_per_epoch: 50,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Weights to load; without one the model is initialised from `seed`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// `[height, width]`, both multiples of 32.
    pub input_size: [usize; 2],
    pub rgb_widths: [usize; 4],
    pub depth_widths: [usize; 4],
    pub fusion_widths: [usize; 4],
    pub decoder_width: usize,
    pub seed: u64,
    pub variant: Variant,
    pub swap_pools: bool,
    pub train: TrainSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input_size: [256, 256],
            rgb_widths: [16, 32, 64, 128],
            depth_widths: [16, 32, 64, 128],
            fusion_widths: [16, 32, 64, 128],
            decoder_width: 32,
            seed: 0,
            variant: Variant::Full,
            swap_pools: false,
            train: TrainSection::default(),
            paths: PathsSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> std::result::Result<Self, String> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    /// Reads and validates a file. A relative checkpoint path is resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|message| CliError::ConfigFile {
            path: path.to_owned(),
            message,
        })?;
        if let Some(ck) = &mut cfg.paths.checkpoint {
            if ck.is_relative() {
                *ck = path.parent().unwrap_or(Path::new(".")).join(&*ck);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable")
    }

    pub fn validate(&self) -> hodinet_core::Result<()> {
        self.model_config()?;
        let t = &self.train;
        if t.batch_size == 0 || t.epochs == 0 {
            return Err(hodinet_core::Error::Config("batch_size and epochs must be positive".into()));
        }
        self.train_config().validate()
    }

    pub fn input_hw(&self) -> (usize, usize) {
        (self.input_size[0], self.input_size[1])
    }

    pub fn model_config(&self) -> hodinet_core::Result<ModelConfig> {
        let cfg = ModelConfig {
            contract: StageContract::new(self.input_hw(), self.rgb_widths, self.depth_widths)?,
            fusion_widths: self.fusion_widths,
            decoder_width: self.decoder_width,
            variant: self.variant.into(),
            swap_pools: self.swap_pools,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            lr_decay: self.train.lr_decay,
            steps_per_epoch: self.train.steps_per_epoch,
        }
    }
}
