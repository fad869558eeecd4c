use serde::{Deserialize, Serialize};

use super::{
    collect_nominal, collect_validation, AdaptiveSchedule, Harness, NominalDataset, RunnerError,
    StartSpec, ValidationSet,
};
use crate::anomaly::{
    build_bank, calibrate_threshold, nominal_fallback_threshold, AnomalyError, DetectorModel,
    FeaturizerSpec, MemoryBank, DEFAULT_FALLBACK_SLACK,
};
use crate::successmodel::{select_by_bic, GmmModel, SelectConfig};

/// Seeds and sizes of the offline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub collect_episodes: usize,
    pub collect_seed: u64,
    pub validation_episodes: usize,
    pub validation_seed: u64,
    /// Target share of anomalous frames in the validation set.
    pub anomalous_fraction: f64,
    pub fallback_slack: f64,
    pub featurizer_seed: u64,
    pub featurizer_dim: usize,
    pub success_seed: u64,
    pub select: SelectConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            collect_episodes: 300,
            collect_seed: 1,
            validation_episodes: 150,
            validation_seed: 2,
            anomalous_fraction: 0.2,
            fallback_slack: DEFAULT_FALLBACK_SLACK,
            featurizer_seed: 11,
            featurizer_dim: 128,
            success_seed: 3,
            select: SelectConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn featurizer(&self, obs_pixels: usize) -> FeaturizerSpec {
        FeaturizerSpec::random_projection(
            self.featurizer_seed,
            (obs_pixels, obs_pixels),
            self.featurizer_dim,
        )
    }
}

/// Builds the memory bank from every nominal frame.
pub fn nominal_bank(
    spec: &FeaturizerSpec,
    data: &NominalDataset,
) -> Result<MemoryBank, RunnerError> {
    let f = spec.build()?;
    Ok(build_bank(f.as_ref(), &data.frames)?)
}

/// Scores validation episodes against `bank` and picks the threshold. With
/// no anomalous frames it falls back to nominal statistics.
pub fn calibrate_detector(
    harness: &Harness,
    spec: FeaturizerSpec,
    bank: MemoryBank,
    start: &StartSpec,
    h_max: u64,
    cfg: &TrainingConfig,
) -> Result<(DetectorModel, ValidationSet), RunnerError> {
    let f = spec.build()?;
    let mut gen = AdaptiveSchedule::new(cfg.anomalous_fraction, harness.sim.obs_pixels);
    let val = collect_validation(
        harness,
        f.as_ref(),
        &bank,
        &mut gen,
        start,
        cfg.validation_episodes,
        h_max,
        cfg.validation_seed,
    )?;
    let cal = match calibrate_threshold(&val.items) {
        Err(AnomalyError::NoAnomalousExamples) => {
            nominal_fallback_threshold(&val.items, cfg.fallback_slack)?
        }
        r => r?,
    };
    let det = DetectorModel::new(bank, cal.tau_star, spec, Some(cal.metrics))?;
    Ok((det, val))
}

pub fn fit_success_model(
    data: &NominalDataset,
    cfg: &TrainingConfig,
) -> Result<GmmModel, RunnerError> {
    Ok(select_by_bic(
        &data.starts,
        1..=cfg.select.k_max,
        cfg.success_seed,
        &cfg.select,
    )?)
}

pub struct Trained {
    pub nominal: NominalDataset,
    pub detector: DetectorModel,
    pub validation: ValidationSet,
    pub success_model: GmmModel,
}

/// The whole offline stage: nominal collection, bank, calibration and
/// success model.
pub fn train(
    harness: &Harness,
    start: &StartSpec,
    h_max: u64,
    cfg: &TrainingConfig,
) -> Result<Trained, RunnerError> {
    let nominal = collect_nominal(harness, start, cfg.collect_episodes, h_max, cfg.collect_seed)?;
    let spec = cfg.featurizer(harness.sim.obs_pixels);
    let bank = nominal_bank(&spec, &nominal)?;
    let (detector, validation) = calibrate_detector(harness, spec, bank, start, h_max, cfg)?;
    let success_model = fit_success_model(&nominal, cfg)?;
    Ok(Trained {
        nominal,
        detector,
        validation,
        success_model,
    })
}
