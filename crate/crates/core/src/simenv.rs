//! Planar point-reach environment with an end-effector-centred camera.
//!
//! The observation is a `W x W` grayscale crop of side `obs_window` metres
//! centred on the end effector. Column index grows with `x`, row index with
//! `y`. Scene pixels are anti-aliased by 4x4 supersampling.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anomaly::ObsImage;
use crate::seed;

pub type Vec2 = [f64; 2];

const SUPERSAMPLE: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid sim config: {0}")]
    InvalidConfig(String),
    #[error("position {0:?} is outside the workspace")]
    OutsideWorkspace(Vec2),
    #[error("episode already ended ({0:?})")]
    NotRunning(Terminal),
    #[error("invalid anomaly: {0}")]
    InvalidAnomaly(String),
    #[error("an open-ended `{0}` anomaly is already scheduled")]
    DuplicateAnomaly(&'static str),
    #[error("initial distance is zero; shaped reward undefined")]
    ZeroInitialDistance,
}

pub fn dist(a: Vec2, b: Vec2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workspace {
    pub min: Vec2,
    pub max: Vec2,
}

impl Workspace {
    pub fn contains(&self, p: Vec2) -> bool {
        (0..2).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn clamp(&self, p: Vec2) -> Vec2 {
        [
            p[0].clamp(self.min[0], self.max[0]),
            p[1].clamp(self.min[1], self.max[1]),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Disc {
    pub center: Vec2,
    pub radius: f64,
}

impl Disc {
    pub fn contains(&self, p: Vec2) -> bool {
        dist(self.center, p) < self.radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Intensities {
    pub background: f64,
    pub obstacle: f64,
    pub target: f64,
}

impl Default for Intensities {
    fn default() -> Self {
        Intensities {
            background: 0.1,
            obstacle: 0.5,
            target: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub workspace: Workspace,
    pub target_pos: Vec2,
    pub target_radius: f64,
    pub success_radius: f64,
    pub obstacles: Vec<Disc>,
    pub a_max: f64,
    pub obs_window: f64,
    pub obs_pixels: usize,
    pub sensor_noise_std: f64,
    pub intensities: Intensities,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            workspace: Workspace {
                min: [0.0, 0.0],
                max: [0.5, 0.5],
            },
            target_pos: [0.35, 0.30],
            target_radius: 0.015,
            success_radius: 0.02,
            obstacles: vec![Disc {
                center: [0.12, 0.38],
                radius: 0.04,
            }],
            a_max: 0.02,
            obs_window: 0.12,
            obs_pixels: 16,
            sensor_noise_std: 0.01,
            intensities: Intensities::default(),
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn pixel_size(&self) -> f64 {
        self.obs_window / self.obs_pixels as f64
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        let ws = &self.workspace;
        if !(0..2).all(|a| ws.min[a].is_finite() && ws.max[a].is_finite() && ws.min[a] < ws.max[a])
        {
            return bad(format!("degenerate workspace {ws:?}"));
        }
        if !(self.success_radius > 0.0) {
            return bad(format!("success_radius must be positive, got {}", self.success_radius));
        }
        if !(self.target_radius > 0.0) {
            return bad(format!("target_radius must be positive, got {}", self.target_radius));
        }
        if !(self.a_max > 0.0) {
            return bad(format!("a_max must be positive, got {}", self.a_max));
        }
        if self.obs_pixels < 8 {
            return bad(format!("obs_pixels must be at least 8, got {}", self.obs_pixels));
        }
        if !(self.obs_window > 0.0) {
            return bad(format!("obs_window must be positive, got {}", self.obs_window));
        }
        if !(self.sensor_noise_std >= 0.0) || !self.sensor_noise_std.is_finite() {
            return bad(format!("sensor_noise_std must be >= 0, got {}", self.sensor_noise_std));
        }
        let i = &self.intensities;
        if [i.background, i.obstacle, i.target]
            .iter()
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return bad("intensities must lie in [0, 1]".into());
        }
        if !ws.contains(self.target_pos) {
            return bad(format!("target {:?} outside workspace", self.target_pos));
        }
        for (n, o) in self.obstacles.iter().enumerate() {
            if !(o.radius > 0.0) || !o.center.iter().all(|v| v.is_finite()) {
                return bad(format!("obstacle {n} is malformed"));
            }
            if dist(o.center, self.target_pos) < o.radius + self.success_radius {
                return bad(format!("obstacle {n} overlaps the success region"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum AnomalyKind {
    /// Square patch of side `size_px` centred at `center_px` (pixel units;
    /// pixel `(c, r)` has its centre at `(c + 0.5, r + 0.5)`).
    OccludePatch {
        center_px: Vec2,
        size_px: f64,
        intensity: f64,
    },
    TargetRemoved,
    /// Renders the target displaced by `delta_m`; the true target is unchanged.
    TargetShift { delta_m: Vec2 },
    Blur { kernel_px: usize },
    FreezeFrame,
}

impl AnomalyKind {
    pub const NAMES: [&'static str; 5] = [
        "occlude_patch",
        "target_removed",
        "target_shift",
        "blur",
        "freeze_frame",
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AnomalyKind::OccludePatch { .. } => "occlude_patch",
            AnomalyKind::TargetRemoved => "target_removed",
            AnomalyKind::TargetShift { .. } => "target_shift",
            AnomalyKind::Blur { .. } => "blur",
            AnomalyKind::FreezeFrame => "freeze_frame",
        }
    }

    /// Patch covering the whole `w x w` frame.
    pub fn full_frame(w: usize, intensity: f64) -> Self {
        AnomalyKind::OccludePatch {
            center_px: [w as f64 / 2.0; 2],
            size_px: w as f64,
            intensity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalySpec {
    #[serde(flatten)]
    pub kind: AnomalyKind,
    pub start_tick: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_ticks: Option<u64>,
}

impl AnomalySpec {
    pub fn new(kind: AnomalyKind, start_tick: u64, duration_ticks: Option<u64>) -> Self {
        AnomalySpec {
            kind,
            start_tick,
            duration_ticks,
        }
    }

    pub fn is_active(&self, tick: u64) -> bool {
        tick >= self.start_tick
            && self
                .duration_ticks
                .is_none_or(|d| tick < self.start_tick.saturating_add(d))
    }

    pub fn is_expired(&self, tick: u64) -> bool {
        self.duration_ticks
            .is_some_and(|d| tick >= self.start_tick.saturating_add(d))
    }

    pub fn validate(&self, obs_pixels: usize) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidAnomaly(m));
        if self.duration_ticks == Some(0) {
            return bad("duration_ticks must be at least 1".into());
        }
        match &self.kind {
            AnomalyKind::OccludePatch {
                center_px,
                size_px,
                intensity,
            } => {
                if !center_px.iter().all(|v| v.is_finite()) || !(*size_px > 0.0) {
                    return bad(format!("patch {center_px:?} size {size_px} is malformed"));
                }
                if !(0.0..=1.0).contains(intensity) {
                    return bad(format!("patch intensity {intensity} outside [0, 1]"));
                }
            }
            AnomalyKind::TargetShift { delta_m } => {
                if !delta_m.iter().all(|v| v.is_finite()) {
                    return bad("shift must be finite".into());
                }
            }
            AnomalyKind::Blur { kernel_px } => {
                if kernel_px % 2 == 0 || *kernel_px > obs_pixels {
                    return bad(format!(
                        "blur kernel must be odd and at most {obs_pixels}, got {kernel_px}"
                    ));
                }
            }
            AnomalyKind::TargetRemoved | AnomalyKind::FreezeFrame => {}
        }
        Ok(())
    }
}

/// Parses a JSON array of anomaly specs.
pub fn parse_schedule(json: &str) -> Result<Vec<AnomalySpec>, serde_json::Error> {
    serde_json::from_str(json)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    Running,
    Success,
    Collision,
    Timeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepEvents {
    pub success: bool,
    pub collision: bool,
    pub d_prev: f64,
    pub d_cur: f64,
    pub d_0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimState {
    pub ee_pos: Vec2,
    pub tick: u64,
    pub active_anomalies: Vec<AnomalySpec>,
    pub terminal: Terminal,
}

#[derive(Debug, Clone)]
pub struct SimEnv {
    cfg: SimConfig,
    state: SimState,
    d_0: f64,
    last_frame: Option<ObsImage>,
}

impl SimEnv {
    /// Starts an episode at `start`. A start inside the success region (or an
    /// obstacle) is resolved immediately.
    pub fn reset(cfg: SimConfig, start: Vec2) -> Result<Self, SimError> {
        cfg.validate()?;
        if !start.iter().all(|v| v.is_finite()) || !cfg.workspace.contains(start) {
            return Err(SimError::OutsideWorkspace(start));
        }
        let d_0 = dist(start, cfg.target_pos);
        let mut env = SimEnv {
            state: SimState {
                ee_pos: start,
                tick: 0,
                active_anomalies: Vec::new(),
                terminal: Terminal::Running,
            },
            cfg,
            d_0,
            last_frame: None,
        };
        env.state.terminal = env.terminal_at(start);
        Ok(env)
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn tick(&self) -> u64 {
        self.state.tick
    }

    pub fn ee_pos(&self) -> Vec2 {
        self.state.ee_pos
    }

    pub fn terminal(&self) -> Terminal {
        self.state.terminal
    }

    pub fn d_0(&self) -> f64 {
        self.d_0
    }

    pub fn distance_to_target(&self) -> f64 {
        dist(self.state.ee_pos, self.cfg.target_pos)
    }

    fn terminal_at(&self, p: Vec2) -> Terminal {
        if self.cfg.obstacles.iter().any(|o| o.contains(p)) {
            Terminal::Collision
        } else if dist(p, self.cfg.target_pos) < self.cfg.success_radius {
            Terminal::Success
        } else {
            Terminal::Running
        }
    }

    fn ensure_running(&self) -> Result<(), SimError> {
        match self.state.terminal {
            Terminal::Running => Ok(()),
            t => Err(SimError::NotRunning(t)),
        }
    }

    fn advance(&mut self, proposed: Vec2) -> Result<StepEvents, SimError> {
        self.ensure_running()?;
        let d_prev = self.distance_to_target();
        let p = self.cfg.workspace.clamp(proposed);
        self.state.ee_pos = p;
        self.state.tick += 1;
        let tick = self.state.tick;
        self.state.active_anomalies.retain(|a| !a.is_expired(tick));
        self.state.terminal = self.terminal_at(p);
        Ok(StepEvents {
            success: self.state.terminal == Terminal::Success,
            collision: self.state.terminal == Terminal::Collision,
            d_prev,
            d_cur: self.distance_to_target(),
            d_0: self.d_0,
        })
    }

    /// Policy motion: each axis clamped to `a_max`, then to the workspace.
    pub fn step(&mut self, delta: Vec2) -> Result<StepEvents, SimError> {
        let a = self.cfg.a_max;
        let d = delta.map(|v| if v.is_finite() { v.clamp(-a, a) } else { 0.0 });
        let p = self.state.ee_pos;
        self.advance([p[0] + d[0], p[1] + d[1]])
    }

    /// Recovery displacement: not limited by `a_max`, still kept in the workspace.
    pub fn displace(&mut self, delta: Vec2) -> Result<StepEvents, SimError> {
        let p = self.state.ee_pos;
        self.advance([p[0] + delta[0], p[1] + delta[1]])
    }

    /// Moves the end effector directly to `pos` (clamped to the workspace).
    pub fn teleport(&mut self, pos: Vec2) -> Result<StepEvents, SimError> {
        self.advance(pos)
    }

    /// Ends the episode on budget exhaustion.
    pub fn mark_timeout(&mut self) {
        if self.state.terminal == Terminal::Running {
            self.state.terminal = Terminal::Timeout;
        }
    }

    pub fn inject_anomaly(&mut self, spec: AnomalySpec) -> Result<(), SimError> {
        self.ensure_running()?;
        spec.validate(self.cfg.obs_pixels)?;
        if spec.duration_ticks.is_none()
            && self
                .state
                .active_anomalies
                .iter()
                .any(|a| a.duration_ticks.is_none() && a.kind.name() == spec.kind.name())
        {
            return Err(SimError::DuplicateAnomaly(spec.kind.name()));
        }
        self.state.active_anomalies.push(spec);
        Ok(())
    }

    /// Removes every scheduled anomaly of the named kind; returns how many.
    pub fn clear_anomaly(&mut self, kind: &str) -> usize {
        let before = self.state.active_anomalies.len();
        self.state.active_anomalies.retain(|a| a.kind.name() != kind);
        before - self.state.active_anomalies.len()
    }

    /// Whether any scheduled anomaly affects the frame rendered at this tick.
    pub fn anomaly_active(&self) -> bool {
        let t = self.state.tick;
        self.state.active_anomalies.iter().any(|a| a.is_active(t))
    }

    pub fn active_now(&self) -> Vec<AnomalySpec> {
        let t = self.state.tick;
        self.state
            .active_anomalies
            .iter()
            .filter(|a| a.is_active(t))
            .cloned()
            .collect()
    }

    /// Renders the observation for the current tick. Sensor noise is seeded
    /// by `(cfg.seed, tick)`.
    pub fn render_obs(&mut self) -> ObsImage {
        let active = self.active_now();
        if active
            .iter()
            .any(|a| matches!(a.kind, AnomalyKind::FreezeFrame))
        {
            if let Some(f) = &self.last_frame {
                return f.clone();
            }
        }
        let removed = active
            .iter()
            .any(|a| matches!(a.kind, AnomalyKind::TargetRemoved));
        let shift = active.iter().fold([0.0, 0.0], |acc, a| match a.kind {
            AnomalyKind::TargetShift { delta_m } => [acc[0] + delta_m[0], acc[1] + delta_m[1]],
            _ => acc,
        });
        let target = if removed {
            None
        } else {
            Some([
                self.cfg.target_pos[0] + shift[0],
                self.cfg.target_pos[1] + shift[1],
            ])
        };
        let mut img = render_scene(&self.cfg, self.state.ee_pos, target);
        for a in &active {
            match &a.kind {
                AnomalyKind::OccludePatch {
                    center_px,
                    size_px,
                    intensity,
                } => paint_patch(&mut img, *center_px, *size_px, *intensity),
                AnomalyKind::Blur { kernel_px } => img = box_blur(&img, *kernel_px),
                _ => {}
            }
        }
        add_noise(
            &mut img,
            self.cfg.sensor_noise_std,
            seed::derive(self.cfg.seed, self.state.tick),
        );
        self.last_frame = Some(img.clone());
        img
    }
}

/// Noise-free scene rendering with the end effector at `ee`. `target` is
/// the rendered target position (`None` hides it).
pub fn render_scene(cfg: &SimConfig, ee: Vec2, target: Option<Vec2>) -> ObsImage {
    let w = cfg.obs_pixels;
    let s = cfg.pixel_size();
    let half = w as f64 / 2.0;
    let tgt = target.map(|t| [t[0] - ee[0], t[1] - ee[1]]);
    let obstacles: Vec<(Vec2, f64)> = cfg
        .obstacles
        .iter()
        .map(|o| ([o.center[0] - ee[0], o.center[1] - ee[1]], o.radius))
        .collect();
    let int = cfg.intensities;
    let mut img = ObsImage::filled(w, w, int.background);
    let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for row in 0..w {
        for col in 0..w {
            let mut acc = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let p = [
                        (col as f64 - half + (sx as f64 + 0.5) / SUPERSAMPLE as f64) * s,
                        (row as f64 - half + (sy as f64 + 0.5) / SUPERSAMPLE as f64) * s,
                    ];
                    acc += if tgt.is_some_and(|t| dist(p, t) < cfg.target_radius) {
                        int.target
                    } else if obstacles.iter().any(|(c, r)| dist(p, *c) < *r) {
                        int.obstacle
                    } else {
                        int.background
                    };
                }
            }
            img.set(col, row, acc / n);
        }
    }
    img
}

fn paint_patch(img: &mut ObsImage, center: Vec2, size: f64, intensity: f64) {
    let h = size / 2.0;
    for row in 0..img.height() {
        for col in 0..img.width() {
            let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
            if (x - center[0]).abs() <= h && (y - center[1]).abs() <= h {
                img.set(col, row, intensity);
            }
        }
    }
}

/// Normalized box filter; near the border only in-bounds pixels are averaged.
pub fn box_blur(img: &ObsImage, kernel: usize) -> ObsImage {
    let r = (kernel / 2) as isize;
    let (w, h) = (img.width() as isize, img.height() as isize);
    let mut out = img.clone();
    for row in 0..h {
        for col in 0..w {
            let (mut sum, mut n) = (0.0, 0.0);
            for dy in -r..=r {
                for dx in -r..=r {
                    let (c, rr) = (col + dx, row + dy);
                    if (0..w).contains(&c) && (0..h).contains(&rr) {
                        sum += img.get(c as usize, rr as usize);
                        n += 1.0;
                    }
                }
            }
            out.set(col as usize, row as usize, sum / n);
        }
    }
    out
}

fn add_noise(img: &mut ObsImage, std: f64, seed: u64) {
    if std == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, std).expect("validated noise std");
    let mut rng = seed::rng(seed);
    for v in img.pixels_mut() {
        *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    pub w_s: f64,
    pub w_c: f64,
    pub r_step: f64,
    pub alpha: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            w_s: 15.0,
            w_c: -5.0,
            r_step: -0.5,
            alpha: 10.0,
        }
    }
}

pub fn shaped_reward(ev: &StepEvents, w: &RewardWeights) -> Result<f64, SimError> {
    if !(ev.d_0 > 0.0) {
        return Err(SimError::ZeroInitialDistance);
    }
    let ind = |b: bool| if b { 1.0 } else { 0.0 };
    Ok(w.w_s * ind(ev.success)
        + w.w_c * ind(ev.collision)
        + w.r_step
        + w.alpha * (ev.d_prev - ev.d_cur) / ev.d_0)
}
