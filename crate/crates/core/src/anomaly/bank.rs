use serde::{Deserialize, Serialize};

use super::{AnomalyError, ClassifierMetrics, Embedding, FeaturizerSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Euclidean,
}

impl Metric {
    pub fn id(self) -> u8 {
        match self {
            Metric::Euclidean => 1,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            1 => Some(Metric::Euclidean),
            _ => None,
        }
    }
}

/// Embeddings of nominal frames, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    data: Vec<f32>,
    dim: usize,
    metric: Metric,
    source_note: String,
}

impl MemoryBank {
    pub fn from_embeddings(
        embeddings: Vec<Embedding>,
        source_note: impl Into<String>,
    ) -> Result<Self, AnomalyError> {
        let dim = embeddings.first().ok_or(AnomalyError::EmptyBank)?.dim();
        let mut data = Vec::with_capacity(dim * embeddings.len());
        for e in embeddings {
            if e.dim() != dim {
                return Err(AnomalyError::DimensionMismatch {
                    expected: dim,
                    got: e.dim(),
                });
            }
            data.extend_from_slice(e.values());
        }
        Self::from_flat(data, dim, source_note)
    }

    /// Builds a bank from `count * dim` row-major values.
    pub fn from_flat(
        data: Vec<f32>,
        dim: usize,
        source_note: impl Into<String>,
    ) -> Result<Self, AnomalyError> {
        if dim == 0 || data.is_empty() {
            return Err(AnomalyError::EmptyBank);
        }
        if data.len() % dim != 0 {
            return Err(AnomalyError::DimensionMismatch {
                expected: dim,
                got: data.len() % dim,
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AnomalyError::NonFinite);
        }
        Ok(MemoryBank {
            data,
            dim,
            metric: Metric::Euclidean,
            source_note: source_note.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn source_note(&self) -> &str {
        &self.source_note
    }

    pub fn get(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub(crate) fn flat(&self) -> &[f32] {
        &self.data
    }
}

fn squared_euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum()
}

/// Exact Euclidean distance from `z` to its nearest neighbour in the bank.
pub fn nearest_distance(bank: &MemoryBank, z: &Embedding) -> Result<f64, AnomalyError> {
    if bank.is_empty() {
        return Err(AnomalyError::EmptyBank);
    }
    if z.dim() != bank.dim() {
        return Err(AnomalyError::DimensionMismatch {
            expected: bank.dim(),
            got: z.dim(),
        });
    }
    let best = bank
        .iter()
        .map(|row| squared_euclidean(row, z.values()))
        .fold(f64::INFINITY, f64::min);
    Ok(best.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Nominal,
    Anomalous,
}

/// Memory bank plus calibrated threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub bank: MemoryBank,
    pub tau_star: f64,
    pub featurizer: FeaturizerSpec,
    pub calibration: Option<ClassifierMetrics>,
}

impl DetectorModel {
    pub fn new(
        bank: MemoryBank,
        tau_star: f64,
        featurizer: FeaturizerSpec,
        calibration: Option<ClassifierMetrics>,
    ) -> Result<Self, AnomalyError> {
        if !tau_star.is_finite() || tau_star < 0.0 {
            return Err(AnomalyError::InvalidThreshold(tau_star));
        }
        if bank.dim() != featurizer.output_dim {
            return Err(AnomalyError::DimensionMismatch {
                expected: featurizer.output_dim,
                got: bank.dim(),
            });
        }
        Ok(DetectorModel {
            bank,
            tau_star,
            featurizer,
            calibration,
        })
    }
}

/// Anomalous iff the nearest-neighbour distance strictly exceeds `tau_star`.
pub fn classify(det: &DetectorModel, z: &Embedding) -> Result<(Decision, f64), AnomalyError> {
    let d = nearest_distance(&det.bank, z)?;
    Ok((decide(d, det.tau_star), d))
}

/// The detection rule on a raw distance.
pub fn decide(distance: f64, tau_star: f64) -> Decision {
    if distance > tau_star {
        Decision::Anomalous
    } else {
        Decision::Nominal
    }
}
