//! On-disk formats.
//!
//! Bank file layout (all integers and floats little-endian):
//!
//! ```text
//! "VGLBANK1" | u32 count | u32 dim | u8 metric (1 = Euclidean)
//!            | count * dim f32 | u32 CRC32 of the f32 payload
//! ```
//!
//! The detector file is JSON and points at its bank file; relative bank paths
//! resolve against the detector file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AnomalyError, ClassifierMetrics, DetectorModel, FeaturizerSpec, MemoryBank, Metric};

pub const BANK_MAGIC: &[u8; 8] = b"VGLBANK1";
const HEADER_LEN: usize = 8 + 4 + 4 + 1;

pub fn encode_bank(bank: &MemoryBank) -> Vec<u8> {
    let payload_len = bank.flat().len() * 4;
    let mut out = Vec::with_capacity(HEADER_LEN + payload_len + 4);
    out.extend_from_slice(BANK_MAGIC);
    out.extend_from_slice(&(bank.len() as u32).to_le_bytes());
    out.extend_from_slice(&(bank.dim() as u32).to_le_bytes());
    out.push(bank.metric().id());
    for v in bank.flat() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[HEADER_LEN..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_bank(bytes: &[u8], source_note: &str) -> Result<MemoryBank, AnomalyError> {
    if bytes.len() < BANK_MAGIC.len() || &bytes[..8] != BANK_MAGIC {
        return Err(AnomalyError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(AnomalyError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let metric = bytes[16];
    if Metric::from_id(metric).is_none() {
        return Err(AnomalyError::UnsupportedMetric(metric));
    }
    if count == 0 || dim == 0 {
        return Err(AnomalyError::EmptyBank);
    }
    let expected = HEADER_LEN + count * dim * 4 + 4;
    if bytes.len() < expected {
        return Err(AnomalyError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(AnomalyError::TrailingBytes(bytes.len() - expected));
    }
    let payload = &bytes[HEADER_LEN..expected - 4];
    let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(AnomalyError::ChecksumMismatch { stored, computed });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    MemoryBank::from_flat(data, dim, source_note)
}

pub fn save_bank(bank: &MemoryBank, path: &Path) -> Result<(), AnomalyError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_bank(bank))?;
    Ok(())
}

pub fn load_bank(path: &Path) -> Result<MemoryBank, AnomalyError> {
    let bytes = fs::read(path)?;
    decode_bank(&bytes, &format!("loaded from {}", path.display()))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectorFile {
    schema: String,
    tau_star: f64,
    bank_path: PathBuf,
    featurizer: FeaturizerSpec,
    calibration: Option<ClassifierMetrics>,
}

/// Writes the detector JSON. The bank itself must already live at
/// `bank_path` (see [`save_bank`]).
pub fn save_detector(
    det: &DetectorModel,
    bank_path: &Path,
    path: &Path,
) -> Result<(), AnomalyError> {
    let file = DetectorFile {
        schema: crate::SCHEMA.to_string(),
        tau_star: det.tau_star,
        bank_path: bank_path.to_path_buf(),
        featurizer: det.featurizer.clone(),
        calibration: det.calibration,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| AnomalyError::MalformedDetector(e.to_string()))?;
    fs::write(path, json + "\n")?;
    Ok(())
}

pub fn load_detector(path: &Path) -> Result<DetectorModel, AnomalyError> {
    let text = fs::read_to_string(path)?;
    let file: DetectorFile =
        serde_json::from_str(&text).map_err(|e| AnomalyError::MalformedDetector(e.to_string()))?;
    if file.schema != crate::SCHEMA {
        return Err(AnomalyError::MalformedDetector(format!(
            "unsupported schema `{}`",
            file.schema
        )));
    }
    let bank_path = if file.bank_path.is_relative() {
        path.parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&file.bank_path)
    } else {
        file.bank_path.clone()
    };
    let bank = load_bank(&bank_path)?;
    DetectorModel::new(bank, file.tau_star, file.featurizer, file.calibration)
}
