use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{AnomalyError, MemoryBank, ObsImage};
use crate::seed;

/// Fixed-length feature vector of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self, AnomalyError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AnomalyError::NonFinite);
        }
        Ok(Embedding(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f32> {
        self.0
    }
}

/// Maps an observation image to an embedding.
///
/// Implementations must be pure: the same image always yields the same
/// embedding, bit for bit.
pub trait Featurizer: Send + Sync {
    fn spec(&self) -> &FeaturizerSpec;

    fn featurize(&self, img: &ObsImage) -> Result<Embedding, AnomalyError>;

    fn output_dim(&self) -> usize {
        self.spec().output_dim
    }
}

/// Serializable identity of a featurizer. Two specs that compare equal build
/// featurizers with bit-identical behavior.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturizerSpec {
    pub kind: String,
    pub seed: u64,
    /// `(width, height)` in pixels.
    pub input_shape: (usize, usize),
    pub output_dim: usize,
}

impl FeaturizerSpec {
    pub fn random_projection(seed: u64, input_shape: (usize, usize), output_dim: usize) -> Self {
        FeaturizerSpec {
            kind: RandomProjection::KIND.to_string(),
            seed,
            input_shape,
            output_dim,
        }
    }

    pub fn build(&self) -> Result<Box<dyn Featurizer>, AnomalyError> {
        match self.kind.as_str() {
            RandomProjection::KIND => Ok(Box::new(RandomProjection::new(self.clone())?)),
            other => Err(AnomalyError::UnknownFeaturizer(other.to_string())),
        }
    }
}

/// Dense Gaussian random projection of the flattened image.
///
/// Entries are i.i.d. standard normal draws from a ChaCha8 stream seeded with
/// `spec.seed`, scaled by `1/sqrt(width * height)`, stored row-major
/// (`output_dim` rows of `width * height` columns).
#[derive(Debug, Clone)]
pub struct RandomProjection {
    spec: FeaturizerSpec,
    matrix: Vec<f64>,
}

impl RandomProjection {
    pub const KIND: &'static str = "random-projection";

    pub fn new(spec: FeaturizerSpec) -> Result<Self, AnomalyError> {
        let (w, h) = spec.input_shape;
        if w == 0 || h == 0 || spec.output_dim == 0 {
            return Err(AnomalyError::InvalidFeaturizer(format!(
                "input shape {:?} and output dim {} must be positive",
                spec.input_shape, spec.output_dim
            )));
        }
        if spec.kind != Self::KIND {
            return Err(AnomalyError::UnknownFeaturizer(spec.kind.clone()));
        }
        let cols = w * h;
        let scale = 1.0 / (cols as f64).sqrt();
        let mut rng = seed::rng(spec.seed);
        let matrix = (0..spec.output_dim * cols)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v * scale
            })
            .collect();
        Ok(RandomProjection { spec, matrix })
    }

    /// The projection matrix, row-major, `output_dim x (width * height)`.
    pub fn projection(&self) -> &[f64] {
        &self.matrix
    }
}

impl Featurizer for RandomProjection {
    fn spec(&self) -> &FeaturizerSpec {
        &self.spec
    }

    fn featurize(&self, img: &ObsImage) -> Result<Embedding, AnomalyError> {
        if img.shape() != self.spec.input_shape {
            return Err(AnomalyError::ShapeMismatch {
                expected: self.spec.input_shape,
                got: img.shape(),
            });
        }
        let x = img.pixels();
        let values = self
            .matrix
            .chunks_exact(x.len())
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() as f32)
            .collect();
        Embedding::new(values)
    }
}

/// Featurizes every image into a new Euclidean memory bank, preserving order.
pub fn build_bank(f: &dyn Featurizer, images: &[ObsImage]) -> Result<MemoryBank, AnomalyError> {
    if images.is_empty() {
        return Err(AnomalyError::NoImages);
    }
    let embeddings = images
        .iter()
        .map(|img| f.featurize(img))
        .collect::<Result<Vec<_>, _>>()?;
    let note = format!(
        "{} frames featurized by {} (seed {})",
        images.len(),
        f.spec().kind,
        f.spec().seed
    );
    MemoryBank::from_embeddings(embeddings, note)
}
