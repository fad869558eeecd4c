//! Policy interface, the scripted reach policy, a seeded noise wrapper and the
//! gripper majority filter.

use std::collections::VecDeque;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anomaly::ObsImage;
use crate::seed;
use crate::simenv::Vec2;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("gripper command {0} outside [0, 1]")]
    GripperOutOfRange(f64),
    #[error("invalid policy parameter: {0}")]
    InvalidParam(String),
}

#[derive(Debug, Clone)]
pub struct PolicyInput<'a> {
    pub obs: &'a ObsImage,
    pub ee_pos: Vec2,
    pub context: Option<&'a str>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutput {
    pub delta: Vec2,
    pub gripper: Option<f64>,
}

impl PolicyOutput {
    pub const HOLD: PolicyOutput = PolicyOutput {
        delta: [0.0, 0.0],
        gripper: None,
    };
}

/// A per-episode policy. Implementations may keep state across calls.
pub trait Policy: Send {
    fn act(&mut self, input: &PolicyInput<'_>) -> PolicyOutput;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReachParams {
    pub threshold: f64,
    pub gain: f64,
    pub a_max: f64,
    /// Metres per pixel of the observation.
    pub pixel_size: f64,
}

impl Default for ReachParams {
    fn default() -> Self {
        ReachParams {
            threshold: 0.75,
            gain: 0.5,
            a_max: 0.02,
            pixel_size: 0.0075,
        }
    }
}

impl ReachParams {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.gain > 0.0 && self.a_max > 0.0 && self.pixel_size > 0.0) {
            return Err(PolicyError::InvalidParam(format!(
                "gain, a_max and pixel_size must be positive: {self:?}"
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(PolicyError::InvalidParam(format!(
                "threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Moves toward the centroid of pixels brighter than the threshold; holds
/// still when there are none.
pub fn scripted_reach(input: &PolicyInput<'_>, p: &ReachParams) -> PolicyOutput {
    let img = input.obs;
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for row in 0..img.height() {
        for col in 0..img.width() {
            if img.get(col, row) > p.threshold {
                sx += col as f64 + 0.5;
                sy += row as f64 + 0.5;
                n += 1;
            }
        }
    }
    if n == 0 {
        return PolicyOutput::HOLD;
    }
    let cx = sx / n as f64 - img.width() as f64 / 2.0;
    let cy = sy / n as f64 - img.height() as f64 / 2.0;
    let step = |off_px: f64| (p.gain * off_px * p.pixel_size).clamp(-p.a_max, p.a_max);
    PolicyOutput {
        delta: [step(cx), step(cy)],
        gripper: None,
    }
}

#[derive(Debug, Clone, Default)]
pub struct ScriptedReach {
    pub params: ReachParams,
}

impl ScriptedReach {
    pub fn new(params: ReachParams) -> Self {
        ScriptedReach { params }
    }
}

impl Policy for ScriptedReach {
    fn act(&mut self, input: &PolicyInput<'_>) -> PolicyOutput {
        scripted_reach(input, &self.params)
    }
}

/// Adds seeded zero-mean Gaussian noise to the inner policy's motion. The
/// environment clamps the result.
pub struct NoisyPolicy<P> {
    inner: P,
    noise: Option<Normal<f64>>,
    rng: ChaCha8Rng,
}

impl<P: Policy> NoisyPolicy<P> {
    pub fn new(inner: P, noise_std: f64, seed: u64) -> Result<Self, PolicyError> {
        if !(noise_std >= 0.0) || !noise_std.is_finite() {
            return Err(PolicyError::InvalidParam(format!(
                "noise_std must be >= 0, got {noise_std}"
            )));
        }
        Ok(NoisyPolicy {
            inner,
            noise: (noise_std > 0.0).then(|| Normal::new(0.0, noise_std).unwrap()),
            rng: seed::rng(seed),
        })
    }
}

impl<P: Policy> Policy for NoisyPolicy<P> {
    fn act(&mut self, input: &PolicyInput<'_>) -> PolicyOutput {
        let mut out = self.inner.act(input);
        if let Some(n) = &self.noise {
            for v in &mut out.delta {
                *v += n.sample(&mut self.rng);
            }
        }
        out
    }
}

pub const GRIPPER_WINDOW: usize = 5;
const OPEN_VOTES_NEEDED: usize = 3;

/// Majority vote over the last five binarized gripper commands. Before five
/// commands have been seen the window is padded with "close" votes.
#[derive(Debug, Clone, Default)]
pub struct GripperFilter {
    window: VecDeque<bool>,
}

impl GripperFilter {
    pub fn new() -> Self {
        GripperFilter {
            window: VecDeque::with_capacity(GRIPPER_WINDOW),
        }
    }

    /// Pushes `g` and returns `true` when the gripper should be open.
    pub fn push(&mut self, g: f64) -> Result<bool, PolicyError> {
        if !(0.0..=1.0).contains(&g) {
            return Err(PolicyError::GripperOutOfRange(g));
        }
        if self.window.len() == GRIPPER_WINDOW {
            self.window.pop_front();
        }
        self.window.push_back(g >= 0.5);
        Ok(self.is_open())
    }

    pub fn is_open(&self) -> bool {
        self.window.iter().filter(|v| **v).count() >= OPEN_VOTES_NEEDED
    }

    pub fn votes(&self) -> impl Iterator<Item = bool> + '_ {
        self.window.iter().copied()
    }
}
