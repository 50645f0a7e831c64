//! Run configuration. Loaded from TOML with one section per subsystem; every
//! field has a desk-scale default so an empty file is a valid config.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PgdsError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PgdsConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub pose: PoseConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Channel widths of the five human-encoder stages.
    pub channels: Vec<usize>,
    pub embedding_dim: usize,
    /// Semantic/appearance ratio of the original backbone's controller.
    /// Recorded for provenance; the convolutional encoder has no such knob.
    pub semantic_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub temperature: f64,
    pub triplet_margin: f64,
    pub guide_margin: f64,
    pub lambda: f64,
    /// Human-encoder stages that feed a projector.
    pub php_stages: Vec<usize>,
    pub include_final_embedding_in_guide: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Identities per batch (P).
    pub identities_per_batch: usize,
    /// Images per identity in a batch (K).
    pub instances_per_identity: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub grad_clip: f64,
    pub warmup_fraction: f64,
    pub augment: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseConfig {
    pub joints: usize,
    /// Widths of the convolutions: the first two have stride 2, the rest refine.
    pub channels: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Gain of the fixed pooled-map-to-embedding projection.
    pub embedding_gain: f64,
}

impl Default for PgdsConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            pose: PoseConfig::default(),
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 96,
            image_width: 32,
            channels: vec![8, 16, 32, 64, 128],
            embedding_dim: 128,
            semantic_ratio: 0.2,
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 2.0,
            triplet_margin: 0.2,
            guide_margin: 2.0,
            lambda: 0.8,
            php_stages: vec![1, 2, 3],
            include_final_embedding_in_guide: true,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            identities_per_batch: 8,
            instances_per_identity: 4,
            base_lr: 3e-3,
            weight_decay: 0.05,
            epochs: 90,
            grad_clip: 5.0,
            warmup_fraction: 0.05,
            augment: true,
        }
    }
}

impl Default for PoseConfig {
    fn default() -> Self {
        Self {
            joints: 13,
            channels: vec![12, 24, 24, 24],
            epochs: 100,
            lr: 2e-3,
            batch_size: 8,
            embedding_gain: 2.0,
        }
    }
}

impl PgdsConfig {
    /// The full-size configuration of the original setup (384x128 input,
    /// 768-wide embedding, batches of 16x4, 250 epochs).
    pub fn full_scale() -> Self {
        let mut cfg = Self::default();
        cfg.model.image_height = 384;
        cfg.model.image_width = 128;
        cfg.model.channels = vec![48, 96, 192, 384, 768];
        cfg.model.embedding_dim = 768;
        cfg.train.identities_per_batch = 16;
        cfg.train.instances_per_identity = 4;
        cfg.train.epochs = 250;
        cfg.train.base_lr = 8e-4;
        cfg
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| PgdsError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PgdsError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let l = &self.loss;
        let m = &self.model;
        let t = &self.train;
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(PgdsError::domain(msg.to_string()))
            }
        };
        check((0.0..=1.0).contains(&l.lambda), "lambda must lie in [0, 1]")?;
        check(l.triplet_margin > 0.0, "triplet margin must be positive")?;
        check(l.guide_margin > 0.0, "guide margin must be positive")?;
        check(l.temperature > 0.0, "temperature must be positive")?;
        check(!l.php_stages.is_empty(), "php_stages must be non-empty")?;
        check(
            l.php_stages.iter().all(|&s| s < 5),
            "php_stages must be drawn from 0..=4",
        )?;
        let mut sorted = l.php_stages.clone();
        sorted.sort_unstable();
        sorted.dedup();
        check(sorted.len() == l.php_stages.len(), "php_stages contains duplicates")?;
        check(m.channels.len() == 5, "exactly five stage widths are required")?;
        check(
            m.channels.windows(2).all(|w| w[0] < w[1]) && m.channels[0] > 0,
            "stage widths must be positive and strictly increasing",
        )?;
        check(
            m.image_height % 32 == 0 && m.image_width % 32 == 0 && m.image_height > 0 && m.image_width > 0,
            "image height and width must be positive multiples of 32",
        )?;
        check(m.embedding_dim > 0, "embedding_dim must be positive")?;
        check(t.identities_per_batch >= 2, "need at least two identities per batch")?;
        check(t.instances_per_identity >= 2, "need at least two instances per identity")?;
        check(t.base_lr > 0.0, "base_lr must be positive")?;
        check(t.grad_clip > 0.0, "grad_clip must be positive")?;
        check((0.0..1.0).contains(&t.warmup_fraction), "warmup_fraction must lie in [0, 1)")?;
        check(self.pose.joints >= 5, "at least five joints are required")?;
        check(self.pose.channels.len() >= 2, "pose encoder needs at least two widths")?;
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.train.identities_per_batch * self.train.instances_per_identity
    }
}
