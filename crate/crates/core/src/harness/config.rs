use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::LossWeights;

use super::scene::MIN_SCENE_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub steps: usize,
    pub lr: f64,
    pub frames: usize,
    pub scene_seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            steps: 300,
            lr: 0.05,
            frames: 4,
            scene_seed: 0,
        }
    }
}

/// Everything a training run needs; the JSON form has exactly the keys
/// `model`, `loss` and `trainer`, and unknown keys at any level are errors.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub trainer: TrainerConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if !(self.trainer.lr > 0.0 && self.trainer.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.trainer.lr)));
        }
        if self.trainer.frames == 0 {
            return Err(Error::invalid("trainer needs at least one frame"));
        }
        if self.model.height < MIN_SCENE_SIZE || self.model.width < MIN_SCENE_SIZE {
            return Err(Error::invalid(format!(
                "training scenes are at least {MIN_SCENE_SIZE}x{MIN_SCENE_SIZE}, config asks for {}x{}",
                self.model.height, self.model.width
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(&text, path)
    }
}
