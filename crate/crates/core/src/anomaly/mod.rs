//! Visual anomaly detection against a memory bank of nominal embeddings.
//!
//! Frames are mapped to embeddings by a [`Featurizer`]; a frame is anomalous
//! when the Euclidean distance from its embedding to the nearest bank entry
//! strictly exceeds the calibrated threshold `tau_star`. The threshold is the
//! validation distance that maximizes the F-score of that rule.

mod bank;
mod calibrate;
mod featurizer;
mod image;
mod store;

pub use bank::{classify, decide, nearest_distance, Decision, DetectorModel, MemoryBank, Metric};
pub use calibrate::{
    calibrate_threshold, nominal_fallback_threshold, prf_from_counts, prf_metrics, Calibration,
    ClassifierMetrics, LabeledDistance, DEFAULT_FALLBACK_SLACK,
};
pub use featurizer::{build_bank, Embedding, Featurizer, FeaturizerSpec, RandomProjection};
pub use image::ObsImage;
pub use store::{
    decode_bank, encode_bank, load_bank, load_detector, save_bank, save_detector, BANK_MAGIC,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnomalyError {
    #[error("image shape {got:?} does not match featurizer input {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("embedding dimension {got} does not match bank dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("memory bank is empty")]
    EmptyBank,
    #[error("no images given")]
    NoImages,
    #[error("non-finite value in embedding")]
    NonFinite,
    #[error("unknown featurizer kind `{0}`")]
    UnknownFeaturizer(String),
    #[error("invalid featurizer: {0}")]
    InvalidFeaturizer(String),
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("validation set has no nominal examples")]
    NoNominalExamples,
    #[error(
        "validation set has no anomalous examples; F-score calibration is undefined, \
         use the nominal-statistics fallback (max nominal distance x slack)"
    )]
    NoAnomalousExamples,
    #[error("invalid distance {0}")]
    InvalidDistance(f64),
    #[error("predictions ({predictions}) and labels ({labels}) differ in length")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("invalid threshold {0}")]
    InvalidThreshold(f64),
    #[error("bad bank file magic")]
    BadMagic,
    #[error("unsupported metric id {0}")]
    UnsupportedMetric(u8),
    #[error("bank file truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("bank file has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("bank checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("malformed detector file: {0}")]
    MalformedDetector(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
