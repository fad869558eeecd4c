use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{ActionKind, EpisodeConfig, EpisodeLog, Harness, Outcome, RunnerError, TickRecord};
use crate::anomaly::{classify, Decision, ObsImage};
use crate::policy::{Policy, PolicyInput};
use crate::recovery::{RecoveryAction, RecoveryState, Stage};
use crate::seed;
use crate::simenv::{AnomalySpec, Disc, SimConfig, SimEnv, Terminal, Vec2, Workspace};

/// Compact scene snapshot for live viewers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scene {
    pub tick: u64,
    pub ee_pos: Vec2,
    pub target: Vec2,
    pub target_radius: f64,
    pub obstacles: Vec<Disc>,
    pub workspace: Workspace,
    pub obs_window: f64,
    pub active_anomalies: Vec<AnomalySpec>,
}

/// An episode advanced one tick at a time. Batch runs drive it to the end;
/// the live service interleaves ticks with injections.
pub struct Episode {
    harness: Harness,
    cfg: EpisodeConfig,
    env: SimEnv,
    policy: Box<dyn Policy>,
    recovery: RecoveryState,
    rng: ChaCha8Rng,
    start: Vec2,
    records: Vec<TickRecord>,
    pending_wait: u64,
    outcome: Option<Outcome>,
    frames: Option<Vec<ObsImage>>,
}

impl Episode {
    pub fn new(harness: &Harness, cfg: EpisodeConfig) -> Result<Self, RunnerError> {
        cfg.validate()?;
        if cfg.monitoring_enabled && harness.monitor.is_none() {
            return Err(RunnerError::Config(
                "monitoring enabled but no detector / success model configured".into(),
            ));
        }
        let sim = SimConfig {
            seed: cfg.sim_seed(),
            ..harness.sim.clone()
        };
        let start = cfg.start.resolve(&sim, cfg.start_seed())?;
        let mut env = SimEnv::reset(sim, start)?;
        if let Some(m) = harness.monitor.as_ref().filter(|_| cfg.monitoring_enabled) {
            let shape = m.featurizer.spec().input_shape;
            let w = env.config().obs_pixels;
            if shape != (w, w) {
                return Err(RunnerError::Config(format!(
                    "featurizer expects {shape:?} images, the environment renders {w}x{w}"
                )));
            }
        }
        if env.terminal() == Terminal::Running {
            for spec in &cfg.anomaly_schedule {
                env.inject_anomaly(spec.clone())?;
            }
        }
        let policy = harness.policy.build(env.config(), cfg.policy_seed())?;
        let mut ep = Episode {
            harness: harness.clone(),
            rng: seed::rng(cfg.recovery_seed()),
            cfg,
            env,
            policy,
            recovery: RecoveryState::new(),
            start,
            records: Vec::new(),
            pending_wait: 0,
            outcome: None,
            frames: None,
        };
        ep.check_end();
        Ok(ep)
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.cfg
    }

    pub fn env(&self) -> &SimEnv {
        &self.env
    }

    pub fn records(&self) -> &[TickRecord] {
        &self.records
    }

    pub fn outcome(&self) -> Option<Outcome> {
        self.outcome
    }

    pub fn is_finished(&self) -> bool {
        self.outcome.is_some()
    }

    pub fn recovery(&self) -> &RecoveryState {
        &self.recovery
    }

    /// Keeps every rendered frame from now on (see [`Episode::take_frames`]).
    pub fn capture_frames(&mut self) {
        self.frames.get_or_insert_with(Vec::new);
    }

    pub fn take_frames(&mut self) -> Vec<ObsImage> {
        self.frames.take().unwrap_or_default()
    }

    pub fn scene(&self) -> Scene {
        let c = self.env.config();
        Scene {
            tick: self.env.tick(),
            ee_pos: self.env.ee_pos(),
            target: c.target_pos,
            target_radius: c.target_radius,
            obstacles: c.obstacles.clone(),
            workspace: c.workspace,
            obs_window: c.obs_window,
            active_anomalies: self.env.active_now(),
        }
    }

    pub fn inject(&mut self, spec: AnomalySpec) -> Result<(), RunnerError> {
        if self.is_finished() {
            return Err(RunnerError::Finished);
        }
        Ok(self.env.inject_anomaly(spec)?)
    }

    pub fn clear(&mut self, kind: &str) -> usize {
        self.env.clear_anomaly(kind)
    }

    fn check_end(&mut self) {
        if self.outcome.is_some() {
            return;
        }
        self.outcome = match self.env.terminal() {
            Terminal::Success => Some(Outcome::Success),
            Terminal::Collision => Some(Outcome::Collision),
            Terminal::Timeout => Some(Outcome::Timeout),
            Terminal::Running if self.env.tick() >= self.cfg.h_max => {
                self.env.mark_timeout();
                Some(Outcome::Timeout)
            }
            Terminal::Running => None,
        };
        if let Some(o) = self.outcome {
            self.recovery.on_episode_end(o == Outcome::Success);
        }
    }

    /// Consumes one tick. Returns `None` once the episode has ended.
    pub fn step(&mut self) -> Result<Option<&TickRecord>, RunnerError> {
        if self.is_finished() {
            return Ok(None);
        }
        let tick = self.env.tick();
        let ee_pos = self.env.ee_pos();
        let obs = self.env.render_obs();
        let anomaly_active = self.env.anomaly_active();
        let monitor = self
            .harness
            .monitor
            .clone()
            .filter(|_| self.cfg.monitoring_enabled);

        let score = match &monitor {
            Some(m) => {
                let z = m.featurizer.featurize(&obs)?;
                Some(classify(&m.detector, &z)?)
            }
            None => None,
        };
        let tau_star = monitor.as_ref().map(|m| m.detector.tau_star);

        let (decision, stage, kind, action, events);
        if self.pending_wait > 0 {
            // Inside a pause: the frame is scored for display only.
            self.pending_wait -= 1;
            decision = None;
            stage = Some(Stage::Er1);
            kind = ActionKind::Wait;
            action = [0.0, 0.0];
            events = self.env.step([0.0, 0.0])?;
        } else if let (Some(m), Some((dec, _))) = (&monitor, score) {
            decision = Some(dec);
            if dec == Decision::Anomalous {
                let bounds = self.harness.reset_bounds();
                let act = self.recovery.on_anomaly(
                    &m.recovery,
                    Some(&m.success_model),
                    &bounds,
                    &mut self.rng,
                )?;
                stage = Some(self.recovery.stage);
                match act {
                    RecoveryAction::Wait { ticks } => {
                        self.pending_wait = ticks - 1;
                        kind = ActionKind::Wait;
                        action = [0.0, 0.0];
                        events = self.env.step([0.0, 0.0])?;
                    }
                    RecoveryAction::Perturb { delta } => {
                        kind = ActionKind::Perturb;
                        action = delta;
                        events = self.env.displace(delta)?;
                    }
                    RecoveryAction::Reset { target } => {
                        kind = ActionKind::Reset;
                        action = target;
                        events = self.env.teleport(target)?;
                    }
                }
            } else {
                self.recovery.on_nominal();
                stage = Some(Stage::Idle);
                kind = ActionKind::Policy;
                let out = self.policy.act(&PolicyInput {
                    obs: &obs,
                    ee_pos,
                    context: None,
                });
                action = out.delta;
                events = self.env.step(out.delta)?;
            }
        } else {
            decision = None;
            stage = None;
            kind = ActionKind::Policy;
            let out = self.policy.act(&PolicyInput {
                obs: &obs,
                ee_pos,
                context: None,
            });
            action = out.delta;
            events = self.env.step(out.delta)?;
        }

        self.records.push(TickRecord {
            tick,
            ee_pos,
            distance_score: score.map(|(_, d)| d),
            tau_star,
            decision,
            recovery_stage: stage,
            action_kind: kind,
            action,
            events,
            anomaly_active,
            obs_digest: format!("{:016x}", obs.digest()),
        });
        if let Some(f) = &mut self.frames {
            f.push(obs);
        }
        self.check_end();
        Ok(self.records.last())
    }

    /// Runs to completion.
    pub fn run(&mut self) -> Result<(), RunnerError> {
        while self.step()?.is_some() {}
        Ok(())
    }

    pub fn into_log(self) -> EpisodeLog {
        let total_ticks = self.records.len() as u64;
        EpisodeLog {
            start: Some(self.start),
            stage_report: self.recovery.stage_report(),
            outcome: self.outcome.unwrap_or(Outcome::Error),
            config: self.cfg,
            records: self.records,
            total_ticks,
            error: None,
        }
    }
}

pub fn run_episode(harness: &Harness, cfg: EpisodeConfig) -> Result<EpisodeLog, RunnerError> {
    let mut ep = Episode::new(harness, cfg)?;
    ep.run()?;
    Ok(ep.into_log())
}
