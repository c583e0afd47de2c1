//! The semantic representation head, its losses, and training.

mod checkpoint;
mod head;
mod loss;
mod train;

use ndarray::Array1;
use thiserror::Error;

pub use checkpoint::Checkpoint;
pub use head::{EmbeddingHead, ForwardCache, HeadGrads};
pub use loss::{
    dual_triplet_loss, ntxent_loss, pair_distance, triplet_loss, ContrastiveBatch,
    EmbeddedTriplet, TripletGrad,
};
pub use train::{average_loss, initial_head, train_srn, TrainConfig, TrainOutcome};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("input has dimension {found}, expected {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("vector is zero before normalization")]
    ZeroVector,
    #[error("non-finite value")]
    NonFinite,
    #[error("inconsistent shapes: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid contrastive batch: {0}")]
    InvalidBatch(String),
    #[error("no answers to train on")]
    NoAnswers,
    #[error("sample `{0}` is not in the feature store")]
    UnknownSample(String),
    #[error("sample `{0}` is not in the base split")]
    NotBase(String),
    #[error("checkpoint line {line}: {message}")]
    Checkpoint { line: usize, message: String },
}

/// Returns `v / |v|` and `|v|`.
pub(crate) fn normalize(v: Array1<f64>) -> Result<(Array1<f64>, f64), EmbeddingError> {
    let norm = v.dot(&v).sqrt();
    if !norm.is_finite() {
        return Err(EmbeddingError::NonFinite);
    }
    if norm == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok((v / norm, norm))
}

/// Maps a base feature vector to a unit-norm embedding.
pub trait Embedder {
    fn embed(&self, features: &[f64]) -> Result<Vec<f64>, EmbeddingError>;
}

impl Embedder for EmbeddingHead {
    fn embed(&self, features: &[f64]) -> Result<Vec<f64>, EmbeddingError> {
        EmbeddingHead::embed(self, features)
    }
}

/// The untuned baseline: base features, L2-normalized.
#[derive(Debug, Clone, Copy, Default)]
pub struct NormalizedFeatures;

impl Embedder for NormalizedFeatures {
    fn embed(&self, features: &[f64]) -> Result<Vec<f64>, EmbeddingError> {
        if features.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        Ok(normalize(Array1::from(features.to_vec()))?.0.to_vec())
    }
}
