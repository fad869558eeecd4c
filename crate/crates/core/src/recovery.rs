//! Three-stage recovery controller: pause, local perturbation, reset to a
//! start drawn from the success model.
//!
//! Each anomalous decision escalates one round; a nominal decision returns
//! the controller to `Idle`. After a reset a persisting anomaly wraps back to
//! pausing, so only the episode budget ends a recovery loop.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simenv::Vec2;
use crate::successmodel::{sample_start, Bounds, GmmModel};

#[derive(Debug, Error, PartialEq)]
pub enum RecoveryError {
    #[error("reset stage reached but no success model is configured")]
    NoSuccessModel,
    #[error("invalid recovery config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoveryConfig {
    pub pause_ticks: u64,
    pub sigma_d: f64,
    pub max_pause_rounds: u32,
    pub max_perturb_rounds: u32,
    pub sample_attempts: usize,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig {
            pause_ticks: 8,
            sigma_d: 0.02,
            max_pause_rounds: 1,
            max_perturb_rounds: 1,
            sample_attempts: crate::successmodel::DEFAULT_MAX_ATTEMPTS,
        }
    }
}

impl RecoveryConfig {
    pub fn validate(&self) -> Result<(), RecoveryError> {
        if self.pause_ticks == 0
            || self.max_pause_rounds == 0
            || self.max_perturb_rounds == 0
            || self.sample_attempts == 0
            || !(self.sigma_d > 0.0 && self.sigma_d.is_finite())
        {
            return Err(RecoveryError::InvalidConfig(format!(
                "all recovery parameters must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Idle,
    Er1,
    Er2,
    Er3,
}

impl Stage {
    pub const RECOVERY: [Stage; 3] = [Stage::Er1, Stage::Er2, Stage::Er3];

    pub fn index(self) -> Option<usize> {
        match self {
            Stage::Idle => None,
            Stage::Er1 => Some(0),
            Stage::Er2 => Some(1),
            Stage::Er3 => Some(2),
        }
    }

    /// Row label used in stage tables.
    pub fn label(self) -> &'static str {
        match self {
            Stage::Idle => "Idle",
            Stage::Er1 => "Pausing",
            Stage::Er2 => "Perturbation",
            Stage::Er3 => "Sampling",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RecoveryAction {
    Wait { ticks: u64 },
    Perturb { delta: Vec2 },
    Reset { target: Vec2 },
}

impl RecoveryAction {
    pub fn tick_cost(&self) -> u64 {
        match self {
            RecoveryAction::Wait { ticks } => *ticks,
            RecoveryAction::Perturb { .. } | RecoveryAction::Reset { .. } => 1,
        }
    }
}

/// The escalation rule on its own: the stage and round number that follow
/// an anomalous decision made in `stage` after `rounds` rounds there.
pub fn escalate(stage: Stage, rounds: u32, cfg: &RecoveryConfig) -> (Stage, u32) {
    match stage {
        Stage::Idle => (Stage::Er1, 1),
        Stage::Er1 if rounds < cfg.max_pause_rounds => (Stage::Er1, rounds + 1),
        Stage::Er1 => (Stage::Er2, 1),
        Stage::Er2 if rounds < cfg.max_perturb_rounds => (Stage::Er2, rounds + 1),
        Stage::Er2 => (Stage::Er3, 1),
        Stage::Er3 => (Stage::Er1, 1),
    }
}

/// Per-stage attempt and success counts in ER1, ER2, ER3 order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageReport {
    pub attempts: [u64; 3],
    pub successes: [u64; 3],
}

impl StageReport {
    /// Counts from the sequence of stages that issued recovery actions in
    /// one episode; the last one is credited if the episode succeeded.
    pub fn from_actions(stages: &[Stage], success: bool) -> Self {
        let mut r = StageReport::default();
        for s in stages {
            if let Some(i) = s.index() {
                r.attempts[i] += 1;
            }
        }
        if success {
            if let Some(i) = stages.iter().rev().find_map(|s| s.index()) {
                r.successes[i] += 1;
            }
        }
        r
    }

    pub fn add(&mut self, other: &StageReport) {
        for i in 0..3 {
            self.attempts[i] += other.attempts[i];
            self.successes[i] += other.successes[i];
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryState {
    pub stage: Stage,
    pub rounds_in_stage: u32,
    pub attempts: [u64; 3],
    pub successes: [u64; 3],
    pub last_action_stage: Option<Stage>,
}

impl Default for RecoveryState {
    fn default() -> Self {
        RecoveryState {
            stage: Stage::Idle,
            rounds_in_stage: 0,
            attempts: [0; 3],
            successes: [0; 3],
            last_action_stage: None,
        }
    }
}

impl RecoveryState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Escalates and returns the recovery action for an anomalous decision.
    /// Reset targets are drawn from `model` and kept inside `bounds`.
    pub fn on_anomaly<R: Rng + ?Sized>(
        &mut self,
        cfg: &RecoveryConfig,
        model: Option<&GmmModel>,
        bounds: &Bounds,
        rng: &mut R,
    ) -> Result<RecoveryAction, RecoveryError> {
        let (stage, rounds) = escalate(self.stage, self.rounds_in_stage, cfg);
        let action = match stage {
            Stage::Er1 => RecoveryAction::Wait {
                ticks: cfg.pause_ticks,
            },
            Stage::Er2 => {
                let n = Normal::new(0.0, cfg.sigma_d)
                    .map_err(|e| RecoveryError::InvalidConfig(e.to_string()))?;
                RecoveryAction::Perturb {
                    delta: [n.sample(rng), n.sample(rng)],
                }
            }
            Stage::Er3 => {
                let model = model.ok_or(RecoveryError::NoSuccessModel)?;
                let s = sample_start(model, rng, bounds, cfg.sample_attempts);
                RecoveryAction::Reset {
                    target: [s.0[0], s.0[1]],
                }
            }
            Stage::Idle => unreachable!("escalation never yields Idle"),
        };
        self.stage = stage;
        self.rounds_in_stage = rounds;
        self.attempts[stage.index().unwrap()] += 1;
        self.last_action_stage = Some(stage);
        Ok(action)
    }

    pub fn on_nominal(&mut self) {
        self.stage = Stage::Idle;
        self.rounds_in_stage = 0;
    }

    /// Credits the stage of the last recovery action when the episode succeeded.
    pub fn on_episode_end(&mut self, success: bool) {
        if success {
            if let Some(i) = self.last_action_stage.and_then(Stage::index) {
                self.successes[i] += 1;
            }
        }
    }

    pub fn stage_report(&self) -> StageReport {
        StageReport {
            attempts: self.attempts,
            successes: self.successes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn unit_model() -> GmmModel {
        GmmModel::new(
            vec![1.0],
            vec![vec![0.3, 0.3]],
            vec![vec![vec![1e-4, 0.0], vec![0.0, 1e-4]]],
            0.0,
            0.0,
            0,
        )
        .unwrap()
    }

    fn bounds() -> Bounds {
        Bounds::new(vec![0.0, 0.0], vec![0.5, 0.5]).unwrap()
    }

    #[test]
    fn escalation_order() {
        let cfg = RecoveryConfig::default();
        let m = unit_model();
        let mut st = RecoveryState::new();
        let mut rng = seed::rng(0);
        let a = st.on_anomaly(&cfg, Some(&m), &bounds(), &mut rng).unwrap();
        assert_eq!(a, RecoveryAction::Wait { ticks: 8 });
        assert_eq!((st.stage, st.attempts), (Stage::Er1, [1, 0, 0]));
        let a = st.on_anomaly(&cfg, Some(&m), &bounds(), &mut rng).unwrap();
        assert!(matches!(a, RecoveryAction::Perturb { .. }));
        assert_eq!(st.stage, Stage::Er2);
        let a = st.on_anomaly(&cfg, Some(&m), &bounds(), &mut rng).unwrap();
        let RecoveryAction::Reset { target } = a else {
            panic!("{a:?}")
        };
        assert!(bounds().contains(&target));
        assert_eq!(st.stage, Stage::Er3);
        st.on_anomaly(&cfg, Some(&m), &bounds(), &mut rng).unwrap();
        assert_eq!((st.stage, st.attempts), (Stage::Er1, [2, 1, 1]));
    }

    #[test]
    fn nominal_resets_stage() {
        let cfg = RecoveryConfig::default();
        let m = unit_model();
        let mut st = RecoveryState::new();
        let mut rng = seed::rng(0);
        st.on_nominal();
        assert_eq!(st, RecoveryState::new());
        for _ in 0..3 {
            st.on_anomaly(&cfg, Some(&m), &bounds(), &mut rng).unwrap();
        }
        st.on_nominal();
        assert_eq!((st.stage, st.rounds_in_stage), (Stage::Idle, 0));
        assert_eq!(st.attempts, [1, 1, 1]);
        st.on_anomaly(&cfg, Some(&m), &bounds(), &mut rng).unwrap();
        assert_eq!(st.stage, Stage::Er1);
    }

    #[test]
    fn missing_model_at_reset() {
        let cfg = RecoveryConfig::default();
        let mut st = RecoveryState::new();
        let mut rng = seed::rng(0);
        st.on_anomaly(&cfg, None, &bounds(), &mut rng).unwrap();
        st.on_anomaly(&cfg, None, &bounds(), &mut rng).unwrap();
        assert_eq!(
            st.on_anomaly(&cfg, None, &bounds(), &mut rng),
            Err(RecoveryError::NoSuccessModel)
        );
        assert_eq!(st.stage, Stage::Er2);
    }

    #[test]
    fn multiple_rounds_per_stage() {
        let cfg = RecoveryConfig {
            max_pause_rounds: 2,
            max_perturb_rounds: 3,
            ..RecoveryConfig::default()
        };
        let mut s = (Stage::Idle, 0);
        let mut seq = vec![];
        for _ in 0..8 {
            s = escalate(s.0, s.1, &cfg);
            seq.push(s.0);
        }
        use Stage::*;
        assert_eq!(seq, [Er1, Er1, Er2, Er2, Er2, Er3, Er1, Er1]);
    }

    #[test]
    fn crediting() {
        use Stage::*;
        assert_eq!(StageReport::default().attempts, [0; 3]);
        let r = StageReport::from_actions(&[Er1, Er1, Er2], true);
        assert_eq!((r.attempts, r.successes), ([2, 1, 0], [0, 1, 0]));
        let r = StageReport::from_actions(&[Er1, Er2, Er3], false);
        assert_eq!(r.successes, [0; 3]);
        let r = StageReport::from_actions(&[], true);
        assert_eq!(r, StageReport::default());

        let mut st = RecoveryState::new();
        st.on_episode_end(true);
        assert_eq!(st.successes, [0; 3]);
    }

    #[test]
    fn invalid_config() {
        let cfg = RecoveryConfig {
            sigma_d: 0.0,
            ..RecoveryConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(RecoveryConfig::default().validate().is_ok());
    }
}
