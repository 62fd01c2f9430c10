//! One TOML file configures a whole run; every field has a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sampling::SamplerOptions;
use crate::training::{DegradationConfig, MotionSpec, StageConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Number of training videos.
    pub count: usize,
    /// Number of held-out videos.
    pub held_out: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub motion: MotionSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 64,
            held_out: 8,
            frames: 14,
            height: 32,
            width: 32,
            motion: MotionSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StagesConfig {
    pub vae: StageConfig,
    pub base: StageConfig,
    pub sr: StageConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
}

impl Default for StagesConfig {
    fn default() -> Self {
        let s = StageConfig::default();
        Self {
            vae: s.clone(),
            base: s.clone(),
            sr: s.clone(),
            stage1: s.clone(),
            stage2: s.clone(),
            stage3: s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnhancerConfig {
    /// Hidden width of the built-in super-resolution network.
    pub sr_width: usize,
}

impl Default for EnhancerConfig {
    fn default() -> Self {
        Self { sr_width: 16 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every subsystem derives its own stream from it.
    pub seed: u64,
    pub model: ModelConfig,
    pub sampler: SamplerOptions,
    pub degradation: DegradationConfig,
    pub data: DataConfig,
    pub stages: StagesConfig,
    pub enhancer: EnhancerConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn load_or_default(path: Option<&PathBuf>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), |p| Self::load(p))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sampler.validate()?;
        self.degradation.validate()?;
        self.data.motion.validate()?;
        for s in [
            &self.stages.vae,
            &self.stages.base,
            &self.stages.sr,
            &self.stages.stage1,
            &self.stages.stage2,
            &self.stages.stage3,
        ] {
            s.validate()?;
        }
        Ok(())
    }
}
