//! The standard evaluation suite.
//!
//! Every scenario has a concrete failure mode for the unmonitored policy:
//! a bright patch on the side facing away from the target pulls the reach
//! policy off until the target leaves the window, a target image dragged
//! past the end effector leads it astray the same way, and a deviated start
//! never shows the target at all.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{target_in_window, EpisodeConfig, StartSpec};
use crate::seed;
use crate::simenv::{AnomalyKind, AnomalySpec, SimConfig, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Temporary bright patch in the corner facing away from the target.
    Occlusion,
    /// Target removed while a bright patch is in view.
    RemovalWithHand,
    /// Blurred view while the rendered target is dragged past the end
    /// effector and away.
    BlurShake,
    /// Start with the target outside the view; no scheduled anomaly.
    DeviatedStart,
}

impl ScenarioKind {
    pub fn label(self) -> &'static str {
        match self {
            ScenarioKind::Occlusion => "occlusion",
            ScenarioKind::RemovalWithHand => "removal",
            ScenarioKind::BlurShake => "blur_shake",
            ScenarioKind::DeviatedStart => "deviated_start",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StandardSuite {
    pub n_episodes: usize,
    pub seed: u64,
    pub h_max: u64,
    pub nominal_point: Vec2,
    pub start_radius: f64,
    /// Scenario of episode `i` is `pattern[i % pattern.len()]`.
    pub pattern: Vec<ScenarioKind>,
    pub anomaly_ticks: [u64; 2],
    pub onset_ticks: [u64; 2],
    pub patch_size_px: f64,
    pub patch_intensity: f64,
    /// Initial displacement of the dragged target image.
    pub shake_offset_m: f64,
    /// Further displacement per tick.
    pub shake_step_m: f64,
    pub blur_kernel_px: usize,
    pub deviated_distance: [f64; 2],
}

impl Default for StandardSuite {
    fn default() -> Self {
        use ScenarioKind::*;
        StandardSuite {
            n_episodes: 100,
            seed: 2024,
            h_max: super::DEFAULT_H_MAX,
            nominal_point: [0.32, 0.28],
            start_radius: 0.025,
            pattern: vec![
                Occlusion,
                DeviatedStart,
                RemovalWithHand,
                DeviatedStart,
                BlurShake,
                DeviatedStart,
            ],
            anomaly_ticks: [10, 16],
            onset_ticks: [0, 0],
            patch_size_px: 5.0,
            patch_intensity: 1.0,
            shake_offset_m: 0.04,
            shake_step_m: 0.01,
            blur_kernel_px: 3,
            deviated_distance: [0.10, 0.16],
        }
    }
}

impl StandardSuite {
    pub fn nominal_start(&self) -> StartSpec {
        StartSpec::Sampled {
            nominal_point: self.nominal_point,
            radius: self.start_radius,
        }
    }
}

/// Unit vector from the target toward `p`; random when they coincide.
fn away_from_target(rng: &mut impl Rng, sim: &SimConfig, p: Vec2) -> Vec2 {
    let v = [p[0] - sim.target_pos[0], p[1] - sim.target_pos[1]];
    let n = v[0].hypot(v[1]);
    if n > 1e-9 {
        [v[0] / n, v[1] / n]
    } else {
        let th = std::f64::consts::TAU * rng.random::<f64>();
        [th.cos(), th.sin()]
    }
}

fn corner_patch(dir: Vec2, w: usize, size: f64, intensity: f64) -> AnomalyKind {
    let c = w as f64 / 2.0;
    let off = c - size / 2.0;
    let sx = if dir[0] >= 0.0 { 1.0 } else { -1.0 };
    let sy = if dir[1] >= 0.0 { 1.0 } else { -1.0 };
    AnomalyKind::OccludePatch {
        center_px: [c + sx * off, c + sy * off],
        size_px: size,
        intensity,
    }
}

fn deviated_start(rng: &mut impl Rng, sim: &SimConfig, range: [f64; 2]) -> Vec2 {
    let t = sim.target_pos;
    let mut p = t;
    for _ in 0..1000 {
        let th = std::f64::consts::TAU * rng.random::<f64>();
        let d = rng.random_range(range[0]..=range[1]);
        p = sim.workspace.clamp([t[0] + d * th.cos(), t[1] + d * th.sin()]);
        let clear = sim
            .obstacles
            .iter()
            .all(|o| crate::simenv::dist(o.center, p) > o.radius + sim.a_max);
        if clear && !target_in_window(sim, p) {
            break;
        }
    }
    p
}

/// Builds the suite. `monitoring` only toggles monitoring; starts, seeds
/// and schedules are identical for both settings.
pub fn standard_suite(spec: &StandardSuite, sim: &SimConfig, monitoring: bool) -> Vec<EpisodeConfig> {
    let w = sim.obs_pixels;
    (0..spec.n_episodes as u64)
        .map(|i| {
            let ep_seed = seed::derive(spec.seed, i);
            let mut rng = seed::rng(seed::derive(ep_seed, 99));
            let kind = spec.pattern[i as usize % spec.pattern.len().max(1)];
            let onset = rng.random_range(spec.onset_ticks[0]..=spec.onset_ticks[1]);
            let dur = rng.random_range(spec.anomaly_ticks[0]..=spec.anomaly_ticks[1]);
            let mut start = spec.nominal_start();
            let cfg = EpisodeConfig {
                index: i,
                label: kind.label().into(),
                h_max: spec.h_max,
                seed: ep_seed,
                start: start.clone(),
                anomaly_schedule: Vec::new(),
                monitoring_enabled: monitoring,
            };
            // The same point the episode will start from.
            let p0 = start
                .resolve(sim, cfg.start_seed())
                .unwrap_or(spec.nominal_point);
            let dir = away_from_target(&mut rng, sim, p0);
            let schedule = match kind {
                ScenarioKind::Occlusion => vec![AnomalySpec::new(
                    corner_patch(dir, w, spec.patch_size_px, spec.patch_intensity),
                    onset,
                    Some(dur),
                )],
                ScenarioKind::RemovalWithHand => vec![
                    AnomalySpec::new(AnomalyKind::TargetRemoved, onset, Some(dur)),
                    AnomalySpec::new(
                        corner_patch(dir, w, spec.patch_size_px, spec.patch_intensity),
                        onset,
                        Some(dur),
                    ),
                ],
                ScenarioKind::BlurShake => {
                    let mut s = vec![AnomalySpec::new(
                        AnomalyKind::Blur {
                            kernel_px: spec.blur_kernel_px,
                        },
                        onset,
                        Some(dur),
                    )];
                    for j in 0..dur {
                        let m = spec.shake_offset_m + spec.shake_step_m * j as f64;
                        s.push(AnomalySpec::new(
                            AnomalyKind::TargetShift {
                                delta_m: [dir[0] * m, dir[1] * m],
                            },
                            onset + j,
                            Some(1),
                        ));
                    }
                    s
                }
                ScenarioKind::DeviatedStart => {
                    start = StartSpec::Explicit {
                        position: deviated_start(&mut rng, sim, spec.deviated_distance),
                    };
                    Vec::new()
                }
            };
            EpisodeConfig {
                start,
                anomaly_schedule: schedule,
                ..cfg
            }
        })
        .collect()
}
