//! Nominal data collection, monitored execution, suites and reports.

mod collect;
mod episode;
mod scenarios;
mod suite;
mod train;

pub use collect::{
    collect_nominal, collect_validation, AdaptiveSchedule, FixedSchedules, NoAnomalies,
    NominalDataset, ScheduleGenerator, ValidationSet,
};
pub use episode::{run_episode, Episode, Scene};
pub use scenarios::{standard_suite, ScenarioKind, StandardSuite};
pub use suite::{
    aggregate, read_log, report_tables, run_suite, write_log, write_suite, LogHeader, LogSummary,
    MetricsReport, ReportTables, SuiteResult,
};
pub use train::{
    calibrate_detector, fit_success_model, nominal_bank, train, Trained, TrainingConfig,
};

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anomaly::{AnomalyError, Decision, DetectorModel, Featurizer};
use crate::policy::{NoisyPolicy, Policy, PolicyError, ReachParams, ScriptedReach};
use crate::recovery::{RecoveryConfig, RecoveryError, Stage, StageReport};
use crate::seed;
use crate::simenv::{dist, AnomalySpec, SimConfig, SimError, StepEvents, Vec2};
use crate::successmodel::{Bounds, GmmModel, SuccessModelError};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("invalid episode config: {0}")]
    Config(String),
    #[error("no successful nominal episodes out of {0}; cannot build a memory bank")]
    NoSuccessfulEpisodes(usize),
    #[error("episode already finished")]
    Finished,
    #[error("malformed log: {0}")]
    MalformedLog(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Anomaly(#[from] AnomalyError),
    #[error(transparent)]
    Recovery(#[from] RecoveryError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    SuccessModel(#[from] SuccessModelError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const DEFAULT_H_MAX: u64 = 100;

/// How an episode's start position is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum StartSpec {
    /// Uniform in a disc around `nominal_point`, avoiding obstacles and the
    /// success region.
    Sampled { nominal_point: Vec2, radius: f64 },
    Explicit { position: Vec2 },
}

impl StartSpec {
    pub fn resolve(&self, sim: &SimConfig, seed: u64) -> Result<Vec2, RunnerError> {
        match self {
            StartSpec::Explicit { position } => Ok(*position),
            StartSpec::Sampled {
                nominal_point,
                radius,
            } => {
                if !(*radius >= 0.0) {
                    return Err(RunnerError::Config(format!("negative start radius {radius}")));
                }
                let mut rng = seed::rng(seed);
                let mut p = *nominal_point;
                for _ in 0..100 {
                    let r = radius * rand::Rng::random::<f64>(&mut rng).sqrt();
                    let th = std::f64::consts::TAU * rand::Rng::random::<f64>(&mut rng);
                    p = sim.workspace.clamp([
                        nominal_point[0] + r * th.cos(),
                        nominal_point[1] + r * th.sin(),
                    ]);
                    let free = !sim.obstacles.iter().any(|o| o.contains(p))
                        && dist(p, sim.target_pos) >= sim.success_radius;
                    if free {
                        break;
                    }
                }
                Ok(p)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeConfig {
    pub index: u64,
    #[serde(default)]
    pub label: String,
    pub h_max: u64,
    pub seed: u64,
    pub start: StartSpec,
    #[serde(default)]
    pub anomaly_schedule: Vec<AnomalySpec>,
    pub monitoring_enabled: bool,
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<(), RunnerError> {
        if self.h_max == 0 {
            return Err(RunnerError::Config("h_max must be at least 1".into()));
        }
        Ok(())
    }

    // Independent streams per episode component.
    pub fn start_seed(&self) -> u64 {
        seed::derive(self.seed, 1)
    }

    pub fn sim_seed(&self) -> u64 {
        seed::derive(self.seed, 2)
    }

    pub fn policy_seed(&self) -> u64 {
        seed::derive(self.seed, 3)
    }

    pub fn recovery_seed(&self) -> u64 {
        seed::derive(self.seed, 4)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Policy,
    Wait,
    Perturb,
    Reset,
}

/// One consumed tick: the frame observed at `tick`, the decision on it, the
/// action executed during the tick and the resulting step events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: u64,
    pub ee_pos: Vec2,
    pub distance_score: Option<f64>,
    pub tau_star: Option<f64>,
    pub decision: Option<Decision>,
    pub recovery_stage: Option<Stage>,
    pub action_kind: ActionKind,
    /// Policy or perturbation displacement, reset target, or zero while waiting.
    pub action: Vec2,
    pub events: StepEvents,
    /// Ground truth: some scheduled anomaly affected this frame.
    pub anomaly_active: bool,
    pub obs_digest: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Collision,
    Timeout,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub config: EpisodeConfig,
    /// `None` when the episode could not be set up.
    pub start: Option<Vec2>,
    pub records: Vec<TickRecord>,
    pub outcome: Outcome,
    pub total_ticks: u64,
    pub stage_report: StageReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl EpisodeLog {
    /// Stages of the ticks on which a recovery action was chosen.
    pub fn recovery_decisions(&self) -> Vec<Stage> {
        self.records
            .iter()
            .filter(|r| r.decision == Some(Decision::Anomalous))
            .filter_map(|r| r.recovery_stage)
            .collect()
    }
}

/// Builds a fresh policy for each episode.
pub trait PolicyFactory: Send + Sync {
    fn build(&self, sim: &SimConfig, seed: u64) -> Result<Box<dyn Policy>, PolicyError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySpec {
    pub threshold: f64,
    pub gain: f64,
    pub noise_std: f64,
}

impl Default for PolicySpec {
    fn default() -> Self {
        PolicySpec {
            threshold: 0.75,
            gain: 0.5,
            noise_std: 0.002,
        }
    }
}

impl PolicySpec {
    pub fn reach_params(&self, sim: &SimConfig) -> ReachParams {
        ReachParams {
            threshold: self.threshold,
            gain: self.gain,
            a_max: sim.a_max,
            pixel_size: sim.pixel_size(),
        }
    }
}

impl PolicyFactory for PolicySpec {
    fn build(&self, sim: &SimConfig, seed: u64) -> Result<Box<dyn Policy>, PolicyError> {
        let params = self.reach_params(sim);
        params.validate()?;
        Ok(Box::new(NoisyPolicy::new(
            ScriptedReach::new(params),
            self.noise_std,
            seed,
        )?))
    }
}

/// Everything monitored execution needs beyond the policy.
pub struct Monitor {
    pub detector: DetectorModel,
    pub featurizer: Box<dyn Featurizer>,
    pub success_model: GmmModel,
    pub recovery: RecoveryConfig,
}

impl Monitor {
    pub fn new(
        detector: DetectorModel,
        success_model: GmmModel,
        recovery: RecoveryConfig,
    ) -> Result<Self, RunnerError> {
        recovery.validate()?;
        if success_model.dim() != 2 {
            return Err(RunnerError::Config(format!(
                "success model has dimension {}, the environment is planar",
                success_model.dim()
            )));
        }
        let featurizer = detector.featurizer.build()?;
        Ok(Monitor {
            detector,
            featurizer,
            success_model,
            recovery,
        })
    }
}

/// Shared, read-only components for running episodes.
#[derive(Clone)]
pub struct Harness {
    pub sim: SimConfig,
    pub policy: Arc<dyn PolicyFactory>,
    pub monitor: Option<Arc<Monitor>>,
}

impl Harness {
    pub fn new(sim: SimConfig, policy: Arc<dyn PolicyFactory>, monitor: Option<Monitor>) -> Self {
        Harness {
            sim,
            policy,
            monitor: monitor.map(Arc::new),
        }
    }

    pub fn reset_bounds(&self) -> Bounds {
        let ws = self.sim.workspace;
        Bounds::new(ws.min.to_vec(), ws.max.to_vec()).expect("validated workspace")
    }
}

/// Whether the target disc is at least partly inside the observation window
/// of an end effector at `ee`.
pub fn target_in_window(sim: &SimConfig, ee: Vec2) -> bool {
    let h = sim.obs_window / 2.0 + sim.target_radius;
    (0..2).all(|a| (sim.target_pos[a] - ee[a]).abs() < h)
}

pub fn distance_to_target(sim: &SimConfig, p: Vec2) -> f64 {
    dist(sim.target_pos, p)
}
