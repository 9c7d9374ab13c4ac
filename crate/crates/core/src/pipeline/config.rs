use serde::{Deserialize, Serialize};

use crate::afm::{AfmConfig, ComponentMask};
use crate::backbone::BackboneConfig;
use crate::numerics::AdamConfig;
use crate::{Error, Result};

/// Where the quality-aware feature `f1` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualitySource {
    /// Precomputed vectors under tag `q` in a feature cache.
    Cached,
    /// The toy patch backbone, trained jointly from images.
    Backbone,
}

/// Everything that determines a training run besides the data.
///
/// The seed has no default: every randomized run names its seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::d")]
    pub d: usize,
    #[serde(default = "defaults::dropout")]
    pub dropout: f64,
    #[serde(default = "defaults::moe")]
    pub moe: bool,
    #[serde(default = "defaults::components")]
    pub components: ComponentMask,
    #[serde(default = "defaults::quality_source")]
    pub quality_source: QualitySource,
    #[serde(default)]
    pub optim: AdamConfig,
    #[serde(default)]
    pub backbone: BackboneConfig,
}

mod defaults {
    use super::*;

    pub fn epochs() -> usize {
        30
    }
    pub fn batch_size() -> usize {
        16
    }
    pub fn d() -> usize {
        784
    }
    pub fn dropout() -> f64 {
        0.1
    }
    pub fn moe() -> bool {
        true
    }
    pub fn components() -> ComponentMask {
        ComponentMask::FULL
    }
    pub fn quality_source() -> QualitySource {
        QualitySource::Cached
    }
}

impl TrainConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            d: defaults::d(),
            dropout: defaults::dropout(),
            moe: defaults::moe(),
            components: defaults::components(),
            quality_source: defaults::quality_source(),
            optim: AdamConfig::default(),
            backbone: BackboneConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.components.is_empty() {
            return Err(Error::InvalidConfig(
                "at least one component must be enabled".into(),
            ));
        }
        self.optim.validate()?;
        if self.uses_backbone() {
            self.backbone.validate()?;
        }
        self.afm_config(1, 1).validate()
    }

    pub fn uses_backbone(&self) -> bool {
        self.components.quality && self.quality_source == QualitySource::Backbone
    }

    pub fn afm_config(&self, quality_dim: usize, semantic_dim: usize) -> AfmConfig {
        AfmConfig {
            d: self.d,
            quality_dim,
            semantic_dim,
            dropout: self.dropout,
            mask: self.components,
            moe: self.moe,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
