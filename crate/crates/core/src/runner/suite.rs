use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Episode, EpisodeConfig, EpisodeLog, Harness, Outcome, RunnerError, TickRecord};
use crate::anomaly::{prf_from_counts, ClassifierMetrics, Decision};
use crate::recovery::{Stage, StageReport};
use crate::simenv::Vec2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: String,
    pub label: String,
    pub monitoring_enabled: bool,
    pub n_episodes: u64,
    pub successes: u64,
    pub collisions: u64,
    pub timeouts: u64,
    pub errors: u64,
    pub success_rate: f64,
    pub total_ticks: u64,
    pub max_episode_ticks: u64,
    pub stage_report: StageReport,
    /// Decisions against ground-truth anomaly activity, over classified ticks.
    pub confusion: Option<ClassifierMetrics>,
}

/// Aggregates episode logs; the result does not depend on their order.
pub fn aggregate(label: &str, logs: &[EpisodeLog]) -> MetricsReport {
    let count = |o: Outcome| logs.iter().filter(|l| l.outcome == o).count() as u64;
    let mut stages = StageReport::default();
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    let mut classified = false;
    for log in logs {
        stages.add(&log.stage_report);
        for r in &log.records {
            match (r.decision, r.anomaly_active) {
                (Some(Decision::Anomalous), true) => tp += 1,
                (Some(Decision::Anomalous), false) => fp += 1,
                (Some(Decision::Nominal), true) => fn_ += 1,
                (Some(Decision::Nominal), false) => tn += 1,
                (None, _) => continue,
            }
            classified = true;
        }
    }
    let n = logs.len() as u64;
    let successes = count(Outcome::Success);
    MetricsReport {
        schema: crate::SCHEMA.to_string(),
        label: label.to_string(),
        monitoring_enabled: logs.iter().any(|l| l.config.monitoring_enabled),
        n_episodes: n,
        successes,
        collisions: count(Outcome::Collision),
        timeouts: count(Outcome::Timeout),
        errors: count(Outcome::Error),
        success_rate: if n == 0 { 0.0 } else { successes as f64 / n as f64 },
        total_ticks: logs.iter().map(|l| l.total_ticks).sum(),
        max_episode_ticks: logs.iter().map(|l| l.total_ticks).max().unwrap_or(0),
        stage_report: stages,
        confusion: classified.then(|| prf_from_counts(tp, fp, fn_, tn)),
    }
}

pub struct SuiteResult {
    pub logs: Vec<EpisodeLog>,
    pub report: MetricsReport,
}

fn run_one(harness: &Harness, cfg: EpisodeConfig) -> EpisodeLog {
    let failed = |cfg: EpisodeConfig, e: RunnerError| EpisodeLog {
        start: None,
        config: cfg,
        records: Vec::new(),
        outcome: Outcome::Error,
        total_ticks: 0,
        stage_report: StageReport::default(),
        error: Some(e.to_string()),
    };
    let mut ep = match Episode::new(harness, cfg.clone()) {
        Ok(ep) => ep,
        Err(e) => return failed(cfg, e),
    };
    match ep.run() {
        Ok(()) => ep.into_log(),
        Err(e) => {
            let mut log = ep.into_log();
            log.outcome = Outcome::Error;
            log.error = Some(e.to_string());
            log
        }
    }
}

/// Runs every episode (in parallel) and aggregates. A failing episode is
/// logged with outcome `error`; the rest of the suite still runs.
pub fn run_suite(
    harness: &Harness,
    label: &str,
    suite: &[EpisodeConfig],
) -> Result<SuiteResult, RunnerError> {
    if suite.is_empty() {
        return Err(RunnerError::Config("empty suite".into()));
    }
    let logs: Vec<EpisodeLog> = suite
        .par_iter()
        .map(|cfg| run_one(harness, cfg.clone()))
        .collect();
    let report = aggregate(label, &logs);
    Ok(SuiteResult { logs, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub schema: String,
    pub kind: String,
    pub version: String,
    pub config: EpisodeConfig,
    pub start: Option<Vec2>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogSummary {
    pub schema: String,
    pub kind: String,
    pub outcome: Outcome,
    pub total_ticks: u64,
    pub stage_report: StageReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// JSONL: a header line, one line per tick record, then a summary line.
pub fn write_log<W: Write>(log: &EpisodeLog, mut w: W) -> Result<(), RunnerError> {
    let header = LogHeader {
        schema: crate::SCHEMA.to_string(),
        kind: "header".into(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: log.config.clone(),
        start: log.start,
    };
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w)?;
    for r in &log.records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    let summary = LogSummary {
        schema: crate::SCHEMA.to_string(),
        kind: "summary".into(),
        outcome: log.outcome,
        total_ticks: log.total_ticks,
        stage_report: log.stage_report,
        error: log.error.clone(),
    };
    serde_json::to_writer(&mut w, &summary)?;
    writeln!(w)?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<EpisodeLog, RunnerError> {
    let lines: Vec<String> = BufReader::new(fs::File::open(path)?)
        .lines()
        .collect::<Result<_, _>>()?;
    if lines.len() < 2 {
        return Err(RunnerError::MalformedLog(format!(
            "{}: expected header and summary lines",
            path.display()
        )));
    }
    let header: LogHeader = serde_json::from_str(&lines[0])?;
    let summary: LogSummary = serde_json::from_str(&lines[lines.len() - 1])?;
    if header.kind != "header" || summary.kind != "summary" || header.schema != crate::SCHEMA {
        return Err(RunnerError::MalformedLog(path.display().to_string()));
    }
    let records = lines[1..lines.len() - 1]
        .iter()
        .map(|l| serde_json::from_str::<TickRecord>(l))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EpisodeLog {
        config: header.config,
        start: header.start,
        records,
        outcome: summary.outcome,
        total_ticks: summary.total_ticks,
        stage_report: summary.stage_report,
        error: summary.error,
    })
}

/// Writes `logs/episode_NNNN.jsonl`, `report.json`, `tables.txt` and the
/// two CSV tables under `dir`.
pub fn write_suite(dir: &Path, result: &SuiteResult) -> Result<(), RunnerError> {
    let logs = dir.join("logs");
    fs::create_dir_all(&logs)?;
    for log in &result.logs {
        let f = fs::File::create(logs.join(format!("episode_{:04}.jsonl", log.config.index)))?;
        let mut w = BufWriter::new(f);
        write_log(log, &mut w)?;
        w.flush()?;
    }
    fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&result.report)? + "\n",
    )?;
    let tables = report_tables(std::slice::from_ref(&result.report));
    fs::write(dir.join("tables.txt"), tables.text())?;
    fs::write(dir.join("success.csv"), &tables.success_csv)?;
    fs::write(dir.join("stages.csv"), &tables.stage_csv)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportTables {
    pub success_text: String,
    pub stage_text: String,
    pub success_csv: String,
    pub stage_csv: String,
}

impl ReportTables {
    pub fn text(&self) -> String {
        format!("{}\n{}", self.success_text, self.stage_text)
    }
}

/// Success-rate table (one row per report) and stage table (rows in
/// Pausing, Perturbation, Sampling order; attempts and successes per report).
pub fn report_tables(reports: &[MetricsReport]) -> ReportTables {
    let mut success_csv = String::from("label,monitoring,episodes,successes,success_rate\n");
    let mut success_text = format!(
        "{:<24} {:>10} {:>9} {:>10} {:>8}\n",
        "policy", "monitoring", "episodes", "successes", "rate"
    );
    for r in reports {
        let rate = format!("{:.2}", r.success_rate);
        writeln!(
            success_csv,
            "{},{},{},{},{}",
            r.label, r.monitoring_enabled, r.n_episodes, r.successes, rate
        )
        .unwrap();
        writeln!(
            success_text,
            "{:<24} {:>10} {:>9} {:>10} {:>8}",
            r.label,
            if r.monitoring_enabled { "on" } else { "off" },
            r.n_episodes,
            r.successes,
            rate
        )
        .unwrap();
    }

    let mut stage_csv = String::from("strategy");
    let mut stage_text = format!("{:<14}", "strategy");
    for r in reports {
        write!(stage_csv, ",{0} attempts,{0} successes", r.label).unwrap();
        write!(
            stage_text,
            " {:>w$} {:>w$}",
            format!("{} att", r.label),
            format!("{} succ", r.label),
            w = r.label.len().max(4) + 5
        )
        .unwrap();
    }
    stage_csv.push('\n');
    stage_text.push('\n');
    for stage in Stage::RECOVERY {
        let i = stage.index().unwrap();
        stage_csv.push_str(stage.label());
        write!(stage_text, "{:<14}", stage.label()).unwrap();
        for r in reports {
            let (a, s) = (r.stage_report.attempts[i], r.stage_report.successes[i]);
            write!(stage_csv, ",{a},{s}").unwrap();
            let w = r.label.len().max(4) + 5;
            write!(stage_text, " {a:>w$} {s:>w$}").unwrap();
        }
        stage_csv.push('\n');
        stage_text.push('\n');
    }
    ReportTables {
        success_text,
        stage_text,
        success_csv,
        stage_csv,
    }
}
