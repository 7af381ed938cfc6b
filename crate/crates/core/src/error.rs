//! Error type shared by all modules.

use std::path::PathBuf;

/// Errors raised by the library.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    /// Underlying I/O failure, annotated with the path involved.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed TIFF structure inside a JPEG APP1 segment.
    #[error("metadata parse error at byte offset {offset}: {message}")]
    MetadataParse { offset: u64, message: String },

    /// File is neither a JPEG nor accompanied by a sidecar record.
    #[error("unsupported format for {path}: not a JPEG and no sidecar record found")]
    UnsupportedFormat { path: PathBuf },

    /// Image or patch smaller than the required patch size.
    #[error("image is too small: {width}x{height}, need at least {min}x{min}")]
    TooSmall { width: u32, height: u32, min: u32 },

    /// No attribute can satisfy the pairwise re-balancing contract.
    #[error("cannot build a balanced batch; deficient attributes: {}", attributes.join(", "))]
    UnsatisfiableBatch { attributes: Vec<String> },

    /// Every label slot of a training batch is masked out.
    #[error("degenerate batch: all label slots are masked invalid")]
    DegenerateBatch,

    /// Checkpoint was trained against a different vocabulary.
    #[error("vocabulary fingerprint mismatch: checkpoint has {expected}, got {actual}")]
    VocabularyMismatch { expected: String, actual: String },

    /// Model input has the wrong shape or arity for the configured objective.
    #[error("model input error: {0}")]
    Input(String),

    /// Malformed checkpoint container.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Metric is undefined for its input (e.g. no positive labels).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Benchmark directory does not match the documented layout.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Invalid configuration or argument combination.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// JSON (de)serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Image decode/encode failure.
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error is a data problem (bad input files, unsatisfiable
    /// corpora) rather than an internal failure. The CLI maps data problems
    /// to exit code 2 and everything else to 3.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::MetadataParse { .. }
                | Error::UnsupportedFormat { .. }
                | Error::TooSmall { .. }
                | Error::UnsatisfiableBatch { .. }
                | Error::DegenerateBatch
                | Error::VocabularyMismatch { .. }
                | Error::Dataset(_)
                | Error::UndefinedMetric(_)
                | Error::Config(_)
        )
    }
}
