//! Detects and localizes image splices by learning photographic
//! self-consistency from unmanipulated photos.
//!
//! The pipeline trains a two-patch consistency predictor supervised only by
//! camera-metadata agreement and post-processing agreement, calibrates the
//! per-attribute predictions into a single patch-pair consistency score, and
//! aggregates pairwise consistency over a patch grid into a per-pixel splice
//! map.
//!
//! Module map:
//!
//! - [`metadata`]: metadata extraction, value canonicalization, vocabulary
//!   construction and corpus indexing
//! - [`sampler`]: rebalanced patch-pair batches with consistency labels
//! - [`net`]: the Siamese consistency predictor and its training loop
//! - [`combiner`]: calibration of per-attribute predictions into one score
//! - [`localize`]: grid planning, affinity matrices, mean-shift merging,
//!   normalized-cuts segmentation and splice masks
//! - [`eval`]: detection / localization metrics and benchmark loaders
//! - [`synth`]: deterministic synthetic corpora and splices for testing
//! - [`config`]: experiment configuration shared by the CLI and library

pub mod combiner;
pub mod config;
pub mod error;
pub mod eval;
pub mod localize;
pub mod metadata;
pub mod net;
pub mod raster;
pub mod sampler;
pub mod synth;

pub use combiner::CombinerModel;
pub use config::ExperimentConfig;
pub use error::Error;
pub use localize::{AffinityMatrix, ConsistencyMap, GridPlan, SpliceResult};
pub use metadata::{AttributeVocabulary, CorpusIndex, PhotoRecord, PixelSource};
pub use net::{Checkpoint, ConsistencyVector, ModelConfig, Objective};
pub use sampler::{AugmentationSpec, PairBatch, PairLabel, Patch};

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Version string embedded into artifact files.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
