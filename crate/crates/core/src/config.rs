//! Experiment configuration.
//!
//! One JSON document drives every subcommand. Missing fields fall back to
//! defaults, and command-line flags override the file. The full
//! configuration is echoed into checkpoints and reports so a run can be
//! reproduced from any artifact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::net::{BackboneKind, ModelConfig, Objective};
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub augmentation: AugmentationConfig,
    pub grid: GridConfig,
    /// Upper bound on data-loading parallelism.
    pub workers: usize,
    /// Evaluation pairs drawn per attribute by `eval-attrs`.
    pub eval_pairs_per_attribute: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            model: ModelConfig::small(Objective::Exif),
            optimizer: OptimizerConfig::default(),
            augmentation: AugmentationConfig::default(),
            grid: GridConfig::default(),
            workers: 1,
            eval_pairs_per_attribute: 200,
        }
    }
}

impl ExperimentConfig {
    /// The full-scale configuration: 50-layer residual backbone, 4096-dim
    /// embeddings, batch size 128, learning rate 1e-4, one million
    /// iterations, 10,000 combiner iterations.
    pub fn full_scale() -> Self {
        ExperimentConfig {
            model: ModelConfig {
                backbone: BackboneKind::Full,
                conv_channels: Vec::new(),
                embedding_dim: 4096,
                head_widths: vec![4096, 2048, 1024],
                output_dim: 83,
                objective: Objective::Exif,
                combiner_hidden: 512,
                pretrained_encoder: None,
            },
            ..ExperimentConfig::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&raw)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augmentation.validate()?;
        if self.optimizer.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.grid.n_longest < 1 {
            return Err(Error::Config("n_longest must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub iterations: u64,
    pub checkpoint_every: u64,
    pub combiner_iterations: u64,
    pub combiner_batch_size: usize,
    pub combiner_learning_rate: f32,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-4,
            batch_size: 128,
            iterations: 1_000_000,
            checkpoint_every: 10_000,
            combiner_iterations: 10_000,
            combiner_batch_size: 128,
            combiner_learning_rate: 1e-4,
        }
    }
}

/// Discretized post-processing parameter sets and branch probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub rejpeg_qualities: Vec<u8>,
    pub blur_sigmas: Vec<f32>,
    pub resize_factors: Vec<f32>,
    /// Probability that both patches receive the same operation set.
    pub same_spec_probability: f64,
    /// Probability that each operation kind is included in a drawn set.
    pub op_probability: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            rejpeg_qualities: vec![50, 60, 70, 80, 90],
            blur_sigmas: vec![0.5, 1.0, 1.5, 2.0],
            resize_factors: vec![0.5, 0.75, 1.25, 1.5],
            same_spec_probability: 0.5,
            op_probability: 0.5,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rejpeg_qualities.is_empty()
            || self.blur_sigmas.is_empty()
            || self.resize_factors.is_empty()
        {
            return Err(Error::Config("augmentation parameter sets must be nonempty".into()));
        }
        for p in [self.same_spec_probability, self.op_probability] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config("augmentation probabilities must be in [0,1]".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    /// Patches sampled along the longest image dimension.
    pub n_longest: usize,
    pub patch_size: u32,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            n_longest: 25,
            patch_size: 128,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_matches_published_hyperparameters() {
        let cfg = ExperimentConfig::full_scale();
        assert_eq!(cfg.optimizer.batch_size, 128);
        assert!((cfg.optimizer.learning_rate - 1e-4).abs() < 1e-12);
        assert_eq!(cfg.optimizer.iterations, 1_000_000);
        assert_eq!(cfg.optimizer.combiner_iterations, 10_000);
        assert_eq!(cfg.model.embedding_dim, 4096);
        assert_eq!(cfg.model.head_widths, vec![4096, 2048, 1024]);
        assert_eq!(cfg.model.output_dim, 83);
        assert_eq!(cfg.grid.n_longest, 25);
    }

    #[test]
    fn partial_json_falls_back_to_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"seed": 99}"#).unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.optimizer.batch_size, 128);
        assert_eq!(cfg.augmentation.rejpeg_qualities, vec![50, 60, 70, 80, 90]);
    }
}
