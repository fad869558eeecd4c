use rand::Rng;
use rayon::prelude::*;

use super::{Episode, EpisodeConfig, Harness, Outcome, RunnerError, StartSpec};
use crate::anomaly::{nearest_distance, Featurizer, LabeledDistance, MemoryBank, ObsImage};
use crate::seed::{self, Fnv64};
use crate::simenv::{AnomalyKind, AnomalySpec};
use crate::successmodel::StartState;

/// Frames of successful anomaly-free episodes and their start states.
#[derive(Debug, Clone, PartialEq)]
pub struct NominalDataset {
    pub frames: Vec<ObsImage>,
    pub starts: Vec<StartState>,
    pub episodes: usize,
}

impl NominalDataset {
    pub fn digest(&self) -> u64 {
        let mut h = Fnv64::default();
        for f in &self.frames {
            h.write(&f.digest().to_le_bytes());
        }
        for s in &self.starts {
            for v in &s.0 {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }
}

fn nominal_config(i: u64, seed: u64, start: &StartSpec, h_max: u64) -> EpisodeConfig {
    EpisodeConfig {
        index: i,
        label: "nominal".into(),
        h_max,
        seed: seed::derive(seed, i),
        start: start.clone(),
        anomaly_schedule: Vec::new(),
        monitoring_enabled: false,
    }
}

/// Runs `n_episodes` anomaly-free episodes without monitoring and keeps the
/// frames and start states of the successful ones.
pub fn collect_nominal(
    harness: &Harness,
    start: &StartSpec,
    n_episodes: usize,
    h_max: u64,
    seed: u64,
) -> Result<NominalDataset, RunnerError> {
    if n_episodes == 0 {
        return Err(RunnerError::Config("n_episodes must be at least 1".into()));
    }
    let runs: Vec<Option<(Vec<ObsImage>, StartState)>> = (0..n_episodes as u64)
        .into_par_iter()
        .map(|i| {
            let mut ep = Episode::new(harness, nominal_config(i, seed, start, h_max))?;
            ep.capture_frames();
            ep.run()?;
            let frames = ep.take_frames();
            let log = ep.into_log();
            Ok((log.outcome == Outcome::Success && !frames.is_empty()).then(|| {
                let s = log.start.expect("started episode");
                (frames, StartState(s.to_vec()))
            }))
        })
        .collect::<Result<_, RunnerError>>()?;
    let mut ds = NominalDataset {
        frames: Vec::new(),
        starts: Vec::new(),
        episodes: n_episodes,
    };
    for (frames, s) in runs.into_iter().flatten() {
        ds.frames.extend(frames);
        ds.starts.push(s);
    }
    if ds.starts.is_empty() {
        return Err(RunnerError::NoSuccessfulEpisodes(n_episodes));
    }
    Ok(ds)
}

/// Chooses the anomaly schedule of each validation episode.
pub trait ScheduleGenerator {
    fn schedule(&mut self, index: u64, seed: u64) -> Vec<AnomalySpec>;
    /// Feedback after each episode: anomalous and total frame counts.
    fn observe(&mut self, _anomalous: usize, _total: usize) {}
}

/// Every episode anomaly-free.
pub struct NoAnomalies;

impl ScheduleGenerator for NoAnomalies {
    fn schedule(&mut self, _: u64, _: u64) -> Vec<AnomalySpec> {
        Vec::new()
    }
}

/// Fixed schedules, cycled.
pub struct FixedSchedules(pub Vec<Vec<AnomalySpec>>);

impl ScheduleGenerator for FixedSchedules {
    fn schedule(&mut self, index: u64, _: u64) -> Vec<AnomalySpec> {
        if self.0.is_empty() {
            return Vec::new();
        }
        self.0[index as usize % self.0.len()].clone()
    }
}

/// Steers the running fraction of anomalous frames toward a target. While
/// the fraction is above target the next episode is clean; otherwise it gets
/// one anomaly (dark full-frame occlusion, dark patch over the centre, target
/// removal or blur) whose duration is sized to close the gap.
#[derive(Debug, Clone)]
pub struct AdaptiveSchedule {
    pub target_fraction: f64,
    pub obs_pixels: usize,
    /// Typical length of a clean episode, used to size durations.
    pub nominal_frames: f64,
    pub min_duration: u64,
    pub max_duration: u64,
    anomalous: usize,
    total: usize,
}

impl AdaptiveSchedule {
    pub fn new(target_fraction: f64, obs_pixels: usize) -> Self {
        AdaptiveSchedule {
            target_fraction,
            obs_pixels,
            nominal_frames: 4.0,
            min_duration: 2,
            max_duration: 30,
            anomalous: 0,
            total: 0,
        }
    }

    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.anomalous as f64 / self.total as f64
        }
    }
}

impl ScheduleGenerator for AdaptiveSchedule {
    fn schedule(&mut self, _index: u64, seed: u64) -> Vec<AnomalySpec> {
        let f = self.target_fraction;
        if self.total > 0 && self.fraction() >= f {
            return Vec::new();
        }
        let need = (f * (self.total as f64 + self.nominal_frames) - self.anomalous as f64) / (1.0 - f);
        let duration = (need.round() as u64).clamp(self.min_duration, self.max_duration);
        let mut rng = seed::rng(seed);
        let w = self.obs_pixels as f64;
        let kind = match rng.random_range(0..4) {
            0 => AnomalyKind::full_frame(self.obs_pixels, rng.random_range(0.0..0.15)),
            1 => AnomalyKind::OccludePatch {
                center_px: [w / 2.0, w / 2.0],
                size_px: rng.random_range(0.5 * w..0.75 * w),
                intensity: rng.random_range(0.05..0.3),
            },
            2 => AnomalyKind::TargetRemoved,
            _ => AnomalyKind::Blur { kernel_px: 3 },
        };
        let onset = rng.random_range(0..3);
        vec![AnomalySpec::new(kind, onset, Some(duration))]
    }

    fn observe(&mut self, anomalous: usize, total: usize) {
        self.anomalous += anomalous;
        self.total += total;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationSet {
    pub items: Vec<LabeledDistance>,
}

impl ValidationSet {
    pub fn anomalous_fraction(&self) -> f64 {
        if self.items.is_empty() {
            return 0.0;
        }
        self.items.iter().filter(|v| v.anomalous).count() as f64 / self.items.len() as f64
    }
}

/// Runs unmonitored episodes under generated schedules and labels every
/// rendered frame anomalous iff some anomaly was active when it was drawn.
#[allow(clippy::too_many_arguments)]
pub fn collect_validation(
    harness: &Harness,
    featurizer: &dyn Featurizer,
    bank: &MemoryBank,
    generator: &mut dyn ScheduleGenerator,
    start: &StartSpec,
    n_episodes: usize,
    h_max: u64,
    seed: u64,
) -> Result<ValidationSet, RunnerError> {
    let mut items = Vec::new();
    for i in 0..n_episodes as u64 {
        let ep_seed = seed::derive(seed, i);
        let mut cfg = nominal_config(i, ep_seed, start, h_max);
        cfg.label = "validation".into();
        cfg.anomaly_schedule = generator.schedule(i, seed::derive(ep_seed, 7));
        let mut ep = Episode::new(harness, cfg)?;
        ep.capture_frames();
        ep.run()?;
        let frames = ep.take_frames();
        let mut anomalous = 0;
        for (frame, rec) in frames.iter().zip(ep.records()) {
            let d = nearest_distance(bank, &featurizer.featurize(frame)?)?;
            anomalous += usize::from(rec.anomaly_active);
            items.push(LabeledDistance {
                distance: d,
                anomalous: rec.anomaly_active,
            });
        }
        generator.observe(anomalous, frames.len());
    }
    Ok(ValidationSet { items })
}
