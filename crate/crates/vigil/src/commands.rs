//! The offline pipeline behind each subcommand.
//!
//! `collect` writes the bank and the nominal summary, `calibrate` turns them
//! into a detector, `fit-success` fits the start-state mixture, `eval` runs
//! the standard suite and `report` tabulates whatever `eval` produced.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use vigil_core::anomaly::{
    load_bank, load_detector, save_bank, save_detector, AnomalyError, DetectorModel, FeaturizerSpec,
};
use vigil_core::runner::{
    calibrate_detector, collect_nominal, fit_success_model, nominal_bank, report_tables,
    run_suite, standard_suite, write_suite, Harness, MetricsReport, Monitor, NominalDataset,
    RunnerError,
};
use vigil_core::successmodel::{load_model, save_model, GmmModel, StartState, SuccessModelError};

use crate::config::{ConfigError, FrameworkConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{what} not found at {path}; run `vigil {producer}` first")]
    Missing {
        what: &'static str,
        path: PathBuf,
        producer: &'static str,
    },
    #[error("{path}: {message}")]
    Artifact { path: PathBuf, message: String },
    #[error(transparent)]
    Runner(#[from] RunnerError),
    #[error(transparent)]
    Anomaly(#[from] AnomalyError),
    #[error(transparent)]
    SuccessModel(#[from] SuccessModelError),
    #[error("service: {0}")]
    Service(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

fn require(path: &Path, what: &'static str, producer: &'static str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing {
            what,
            path: path.to_path_buf(),
            producer,
        })
    }
}

fn artifact_err(path: &Path, e: impl ToString) -> CliError {
    CliError::Artifact {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| artifact_err(path, e))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// What `collect` leaves next to the bank: how the bank was embedded and
/// the start states of the successful episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NominalSummary {
    pub schema: String,
    pub featurizer: FeaturizerSpec,
    pub episodes: usize,
    pub frames: usize,
    pub starts: Vec<StartState>,
}

pub fn load_nominal(path: &Path) -> Result<NominalSummary, CliError> {
    require(path, "nominal summary", "collect")?;
    let text = fs::read_to_string(path)?;
    let s: NominalSummary = serde_json::from_str(&text).map_err(|e| artifact_err(path, e))?;
    if s.schema != vigil_core::SCHEMA {
        return Err(artifact_err(path, format!("unsupported schema `{}`", s.schema)));
    }
    Ok(s)
}

pub fn harness(cfg: &FrameworkConfig, monitor: Option<Monitor>) -> Harness {
    Harness::new(cfg.sim.clone(), Arc::new(cfg.policy), monitor)
}

/// Loads the detector and success model and wraps them for monitored runs.
pub fn load_monitor(cfg: &FrameworkConfig) -> Result<Monitor, CliError> {
    require(&cfg.paths.detector, "detector", "calibrate")?;
    require(&cfg.paths.success_model, "success model", "fit-success")?;
    let det = load_detector(&cfg.paths.detector).map_err(|e| match e {
        AnomalyError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => CliError::Missing {
            what: "memory bank referenced by the detector",
            path: cfg.paths.detector.clone(),
            producer: "collect",
        },
        e => artifact_err(&cfg.paths.detector, e),
    })?;
    let gmm = load_model(&cfg.paths.success_model)
        .map_err(|e| artifact_err(&cfg.paths.success_model, e))?;
    Ok(Monitor::new(det, gmm, cfg.recovery)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollectSummary {
    pub episodes: usize,
    pub successful: usize,
    pub frames: usize,
    pub bank_dim: usize,
}

pub fn collect(cfg: &FrameworkConfig) -> Result<CollectSummary, CliError> {
    let t = &cfg.training;
    let h = harness(cfg, None);
    let data = collect_nominal(
        &h,
        &cfg.suite.nominal_start(),
        t.collect_episodes,
        cfg.suite.h_max,
        t.collect_seed,
    )?;
    let spec = t.featurizer(cfg.sim.obs_pixels);
    let bank = nominal_bank(&spec, &data)?;
    save_bank(&bank, &cfg.paths.bank)?;
    write_json(
        &cfg.paths.nominal,
        &NominalSummary {
            schema: vigil_core::SCHEMA.into(),
            featurizer: spec,
            episodes: data.episodes,
            frames: data.frames.len(),
            starts: data.starts.clone(),
        },
    )?;
    Ok(CollectSummary {
        episodes: data.episodes,
        successful: data.starts.len(),
        frames: data.frames.len(),
        bank_dim: bank.dim(),
    })
}

/// `bank` as the detector file should reference it: relative when both
/// files share a directory, absolute otherwise.
fn bank_reference(bank: &Path, detector: &Path) -> Result<PathBuf, CliError> {
    if bank.parent() == detector.parent() {
        if let Some(name) = bank.file_name() {
            return Ok(PathBuf::from(name));
        }
    }
    Ok(fs::canonicalize(bank)?)
}

pub fn calibrate(cfg: &FrameworkConfig) -> Result<DetectorModel, CliError> {
    require(&cfg.paths.bank, "memory bank", "collect")?;
    let nominal = load_nominal(&cfg.paths.nominal)?;
    let bank = load_bank(&cfg.paths.bank).map_err(|e| artifact_err(&cfg.paths.bank, e))?;
    let h = harness(cfg, None);
    let (det, _) = calibrate_detector(
        &h,
        nominal.featurizer,
        bank,
        &cfg.suite.nominal_start(),
        cfg.suite.h_max,
        &cfg.training,
    )?;
    let reference = bank_reference(&cfg.paths.bank, &cfg.paths.detector)?;
    save_detector(&det, &reference, &cfg.paths.detector)?;
    Ok(det)
}

pub fn fit_success(cfg: &FrameworkConfig) -> Result<GmmModel, CliError> {
    let nominal = load_nominal(&cfg.paths.nominal)?;
    let data = NominalDataset {
        frames: Vec::new(),
        starts: nominal.starts,
        episodes: nominal.episodes,
    };
    let model = fit_success_model(&data, &cfg.training)?;
    save_model(&model, &cfg.paths.success_model)?;
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalModes {
    pub baseline: bool,
    pub monitored: bool,
}

pub const BASELINE: &str = "baseline";
pub const MONITORED: &str = "monitored";

pub fn eval(cfg: &FrameworkConfig, modes: EvalModes) -> Result<Vec<MetricsReport>, CliError> {
    let mut out = Vec::new();
    if modes.baseline {
        let h = harness(cfg, None);
        let suite = standard_suite(&cfg.suite, &cfg.sim, false);
        let result = run_suite(&h, BASELINE, &suite)?;
        write_suite(&cfg.paths.eval_dir.join(BASELINE), &result)?;
        out.push(result.report);
    }
    if modes.monitored {
        let h = harness(cfg, Some(load_monitor(cfg)?));
        let suite = standard_suite(&cfg.suite, &cfg.sim, true);
        let result = run_suite(&h, MONITORED, &suite)?;
        write_suite(&cfg.paths.eval_dir.join(MONITORED), &result)?;
        out.push(result.report);
    }
    Ok(out)
}

/// Reads every suite report under the eval directory (baseline first) and
/// writes the combined tables next to them. Returns the text tables.
pub fn report(cfg: &FrameworkConfig) -> Result<String, CliError> {
    let mut reports = Vec::new();
    for label in [BASELINE, MONITORED] {
        let path = cfg.paths.eval_dir.join(label).join("report.json");
        if path.exists() {
            let text = fs::read_to_string(&path)?;
            let r: MetricsReport = serde_json::from_str(&text).map_err(|e| artifact_err(&path, e))?;
            reports.push(r);
        }
    }
    if reports.is_empty() {
        return Err(CliError::Missing {
            what: "evaluation reports",
            path: cfg.paths.eval_dir.clone(),
            producer: "eval",
        });
    }
    let tables = report_tables(&reports);
    let dir = &cfg.paths.eval_dir;
    fs::write(dir.join("tables.txt"), tables.text())?;
    fs::write(dir.join("success.csv"), &tables.success_csv)?;
    fs::write(dir.join("stages.csv"), &tables.stage_csv)?;
    Ok(tables.text())
}
