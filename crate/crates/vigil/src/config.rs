//! The framework configuration file.
//!
//! One JSON document; every section is optional and falls back to its
//! defaults. Keys can be overridden from the command line with
//! `--set section.key=value`, where `value` is parsed as JSON and taken as a
//! plain string when that fails.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use vigil_core::recovery::RecoveryConfig;
use vigil_core::runner::{PolicySpec, StandardSuite, TrainingConfig};
use vigil_core::simenv::SimConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config {path} is not valid JSON: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("malformed override `{0}` (expected key=value)")]
    MalformedOverride(String),
    #[error("invalid value at `{path}`: {message}")]
    Invalid { path: String, message: String },
}

fn invalid(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        path: path.to_string(),
        message: message.into(),
    }
}

/// Where each stage reads and writes its artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub bank: PathBuf,
    /// Collection summary: featurizer spec and successful start states.
    pub nominal: PathBuf,
    pub detector: PathBuf,
    pub success_model: PathBuf,
    /// Evaluation output; one subdirectory per suite.
    pub eval_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            bank: "artifacts/bank.bin".into(),
            nominal: "artifacts/nominal.json".into(),
            detector: "artifacts/detector.json".into(),
            success_model: "artifacts/success_model.json".into(),
            eval_dir: "artifacts/eval".into(),
        }
    }
}

impl Paths {
    /// Resolves relative paths against `base`.
    pub fn rebase(&mut self, base: &Path) {
        for p in [
            &mut self.bank,
            &mut self.nominal,
            &mut self.detector,
            &mut self.success_model,
            &mut self.eval_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    pub tick_rate_hz: f64,
    pub max_sessions: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            host: "127.0.0.1".into(),
            port: 8080,
            tick_rate_hz: 5.0,
            max_sessions: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrameworkConfig {
    pub schema: String,
    pub sim: SimConfig,
    pub policy: PolicySpec,
    pub recovery: RecoveryConfig,
    pub training: TrainingConfig,
    /// Evaluation suite; also supplies episode defaults (h_max, seed,
    /// nominal start region).
    pub suite: StandardSuite,
    pub paths: Paths,
    pub service: ServiceConfig,
}

impl Default for FrameworkConfig {
    fn default() -> Self {
        FrameworkConfig {
            schema: vigil_core::SCHEMA.to_string(),
            sim: SimConfig::default(),
            policy: PolicySpec::default(),
            recovery: RecoveryConfig::default(),
            training: TrainingConfig::default(),
            suite: StandardSuite::default(),
            paths: Paths::default(),
            service: ServiceConfig::default(),
        }
    }
}

/// Overlays `patch` on `base`, refusing keys `base` does not have.
fn merge(base: &mut Value, patch: Value, path: &str) -> Result<(), ConfigError> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &sub)?,
                    None => return Err(ConfigError::UnknownKey(sub)),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

fn apply_override(root: &mut Value, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| ConfigError::MalformedOverride(assignment.to_string()))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = &mut *root;
    for part in key.split('.') {
        slot = match slot {
            Value::Object(m) => m
                .get_mut(part)
                .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?,
            Value::Array(a) => part
                .parse::<usize>()
                .ok()
                .and_then(|i| a.get_mut(i))
                .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        };
    }
    *slot = value;
    Ok(())
}

impl FrameworkConfig {
    /// Defaults, then the file (if any), then the overrides; validated.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut root = serde_json::to_value(FrameworkConfig::default()).expect("serializable");
        if let Some(p) = path {
            let text = fs::read_to_string(p).map_err(|source| ConfigError::Read {
                path: p.to_path_buf(),
                source,
            })?;
            let patch: Value = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
                path: p.to_path_buf(),
                source,
            })?;
            merge(&mut root, patch, "")?;
        }
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: FrameworkConfig = serde_path_to_error::deserialize(root).map_err(|e| {
            invalid(&e.path().to_string(), e.inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema != vigil_core::SCHEMA {
            return Err(invalid("schema", format!("expected `{}`", vigil_core::SCHEMA)));
        }
        self.sim.validate().map_err(|e| invalid("sim", e.to_string()))?;
        self.recovery
            .validate()
            .map_err(|e| invalid("recovery", e.to_string()))?;
        self.policy
            .reach_params(&self.sim)
            .validate()
            .map_err(|e| invalid("policy", e.to_string()))?;
        if !(self.policy.noise_std >= 0.0) {
            return Err(invalid("policy.noise_std", "must be >= 0"));
        }

        let t = &self.training;
        if t.collect_episodes == 0 {
            return Err(invalid("training.collect_episodes", "must be at least 1"));
        }
        if t.validation_episodes == 0 {
            return Err(invalid("training.validation_episodes", "must be at least 1"));
        }
        if !(t.anomalous_fraction > 0.0 && t.anomalous_fraction < 1.0) {
            return Err(invalid("training.anomalous_fraction", "must lie in (0, 1)"));
        }
        if !(t.fallback_slack >= 1.0) || !t.fallback_slack.is_finite() {
            return Err(invalid("training.fallback_slack", "must be >= 1"));
        }
        if t.featurizer_dim == 0 {
            return Err(invalid("training.featurizer_dim", "must be at least 1"));
        }
        if t.select.k_max == 0 {
            return Err(invalid("training.select.k_max", "must be at least 1"));
        }
        if t.select.n_restarts == 0 {
            return Err(invalid("training.select.n_restarts", "must be at least 1"));
        }
        if t.select.em.max_iter == 0 {
            return Err(invalid("training.select.em.max_iter", "must be at least 1"));
        }
        if !(t.select.em.tol > 0.0) {
            return Err(invalid("training.select.em.tol", "must be positive"));
        }
        if !(t.select.em.reg > 0.0) {
            return Err(invalid("training.select.em.reg", "must be positive"));
        }

        let s = &self.suite;
        if s.n_episodes == 0 {
            return Err(invalid("suite.n_episodes", "must be at least 1"));
        }
        if s.h_max == 0 {
            return Err(invalid("suite.h_max", "must be at least 1"));
        }
        if s.pattern.is_empty() {
            return Err(invalid("suite.pattern", "must name at least one scenario"));
        }
        if !(s.start_radius >= 0.0) {
            return Err(invalid("suite.start_radius", "must be >= 0"));
        }
        if !self.sim.workspace.contains(s.nominal_point) {
            return Err(invalid("suite.nominal_point", "must lie inside the workspace"));
        }
        for (name, r) in [("anomaly_ticks", s.anomaly_ticks), ("onset_ticks", s.onset_ticks)] {
            if r[0] > r[1] {
                return Err(invalid(&format!("suite.{name}"), "lower bound exceeds upper"));
            }
        }
        if s.anomaly_ticks[0] == 0 {
            return Err(invalid("suite.anomaly_ticks", "durations must be at least 1"));
        }
        if !(s.deviated_distance[0] > 0.0 && s.deviated_distance[0] <= s.deviated_distance[1]) {
            return Err(invalid("suite.deviated_distance", "must be a positive range"));
        }
        if s.blur_kernel_px % 2 == 0 || s.blur_kernel_px > self.sim.obs_pixels {
            return Err(invalid("suite.blur_kernel_px", "must be odd and fit the image"));
        }
        if !(0.0..=1.0).contains(&s.patch_intensity) {
            return Err(invalid("suite.patch_intensity", "must lie in [0, 1]"));
        }
        if !(s.patch_size_px > 0.0) {
            return Err(invalid("suite.patch_size_px", "must be positive"));
        }

        let v = &self.service;
        if !(v.tick_rate_hz > 0.0) || !v.tick_rate_hz.is_finite() {
            return Err(invalid("service.tick_rate_hz", "must be positive"));
        }
        if v.max_sessions == 0 {
            return Err(invalid("service.max_sessions", "must be at least 1"));
        }
        Ok(())
    }
}
