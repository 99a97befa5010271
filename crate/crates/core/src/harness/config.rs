//! The experiment configuration document.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{EncoderConfig, SceneConfig};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::{Geometry, ModelConfig};

/// AdamW settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, weight_decay: 1e-4, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    /// Seeds parameter init, the frozen encoders, batching and Gumbel noise.
    pub seed: u64,
    /// Loss log interval in iterations; 0 disables.
    pub log_every: u64,
    /// Train-set evaluation interval; 0 evaluates only at the end.
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { iterations: 2000, batch_size: 4, seed: 7, log_every: 50, eval_every: 500 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Number of scenes `gen-data` writes.
    pub count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { count: 32 }
    }
}

/// Everything an experiment depends on. Every field has a default and
/// unknown fields are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scene: SceneConfig,
    pub encoder: EncoderConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Full-size model dimensions (C^h 256, N 100); untested at this scale.
    pub fn full_scale() -> Self {
        ExperimentConfig { model: ModelConfig::full_scale(), ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.encoder.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        let o = &self.optim;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::config("lr must be positive and betas in [0, 1)"));
        }
        if !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return Err(Error::config("eps must be positive and weight_decay non-negative"));
        }
        if self.train.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            height: self.scene.height,
            width: self.scene.width,
            visual_channels: self.encoder.visual_channels,
            audio_channels: self.encoder.audio_channels,
            num_categories: self.scene.num_categories,
        }
    }

    /// Check that a dataset's scenes fit the model this config builds.
    pub fn check_scene(&self, scene: &SceneConfig) -> Result<()> {
        if scene.num_categories != self.scene.num_categories
            || scene.height != self.scene.height
            || scene.width != self.scene.width
        {
            return Err(Error::validation(format!(
                "dataset has K={} at {}×{}, config expects K={} at {}×{}",
                scene.num_categories, scene.height, scene.width, self.scene.num_categories, self.scene.height, self.scene.width
            )));
        }
        Ok(())
    }
}
