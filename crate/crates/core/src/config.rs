//! One JSON document holding every knob of a run. Missing keys take their
//! defaults; unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::heads::LossConfig;
use crate::model::{ModelConfig, Variant};
use crate::scene::{generate_sequence, Sequence, VoxelConfig};
use crate::tracker::TrainConfig;
use crate::transformer::TransformerConfig;

pub const SEED_ENV: &str = "LTTR_SEED";

/// Synthetic data settings used by `gen` and the experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub sequences: usize,
    pub frames: usize,
    pub clutter_density: f64,
    pub point_budget: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            sequences: 8,
            frames: 20,
            clutter_density: 0.3,
            point_budget: 200,
        }
    }
}

impl DataConfig {
    /// `count` sequences seeded `seed, seed + 1, ...`.
    pub fn generate(&self, seed: u64, count: usize) -> Result<Vec<Sequence>> {
        (0..count as u64)
            .map(|i| generate_sequence(seed.wrapping_add(i), self.frames, self.clutter_density, self.point_budget))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub voxel: VoxelConfig,
    pub backbone: BackboneConfig,
    pub transformer: TransformerConfig,
    pub variant: Variant,
    pub sigmoid_region_weights: bool,
    pub heatmap_bias: f64,
    pub normalize_similarity: bool,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            seed: 0,
            voxel: m.voxel,
            backbone: m.backbone,
            transformer: m.transformer,
            variant: m.variant,
            sigmoid_region_weights: m.sigmoid_region_weights,
            heatmap_bias: m.heatmap_bias,
            normalize_similarity: m.normalize_similarity,
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json(origin, e))
    }

    /// Reads a config file and applies the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text, path)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            voxel: self.voxel.clone(),
            backbone: self.backbone.clone(),
            transformer: self.transformer.clone(),
            variant: self.variant,
            sigmoid_region_weights: self.sigmoid_region_weights,
            heatmap_bias: self.heatmap_bias,
            normalize_similarity: self.normalize_similarity,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
