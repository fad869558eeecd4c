use serde::{Deserialize, Serialize};

use super::AnomalyError;

/// Slack applied to the largest nominal distance when no anomalous
/// validation examples exist.
pub const DEFAULT_FALLBACK_SLACK: f64 = 1.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledDistance {
    pub distance: f64,
    pub anomalous: bool,
}

impl LabeledDistance {
    pub fn nominal(distance: f64) -> Self {
        LabeledDistance {
            distance,
            anomalous: false,
        }
    }

    pub fn anomalous(distance: f64) -> Self {
        LabeledDistance {
            distance,
            anomalous: true,
        }
    }
}

/// Confusion counts with precision, recall and F-score. Ratios whose
/// denominator is zero are reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn prf_from_counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> ClassifierMetrics {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f_score = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    ClassifierMetrics {
        tp,
        fp,
        fn_,
        tn,
        precision,
        recall,
        f_score,
    }
}

/// Metrics of binary predictions (`true` = anomalous) against labels.
pub fn prf_metrics(predictions: &[bool], labels: &[bool]) -> Result<ClassifierMetrics, AnomalyError> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(AnomalyError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(prf_from_counts(tp, fp, fn_, tn))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub tau_star: f64,
    pub metrics: ClassifierMetrics,
}

fn validate(validation: &[LabeledDistance]) -> Result<(), AnomalyError> {
    if validation.is_empty() {
        return Err(AnomalyError::EmptyValidation);
    }
    if let Some(bad) = validation
        .iter()
        .find(|v| !v.distance.is_finite() || v.distance < 0.0)
    {
        return Err(AnomalyError::InvalidDistance(bad.distance));
    }
    if validation.iter().all(|v| v.anomalous) {
        return Err(AnomalyError::NoNominalExamples);
    }
    Ok(())
}

/// Exact comparison of F-scores from counts: F = 2tp / (2tp + fp + fn).
fn f_at_least(a: &ClassifierMetrics, b: &ClassifierMetrics) -> bool {
    let frac = |m: &ClassifierMetrics| {
        let num = 2 * m.tp as u128;
        (num, num + m.fp as u128 + m.fn_ as u128)
    };
    let ((an, ad), (bn, bd)) = (frac(a), frac(b));
    match (ad, bd) {
        (_, 0) => true,
        (0, _) => bn == 0,
        _ => an * bd >= bn * ad,
    }
}

/// Picks the validation distance that, used as `tau` in the rule
/// `distance > tau`, maximizes the F-score. Ties go to the largest `tau`.
pub fn calibrate_threshold(validation: &[LabeledDistance]) -> Result<Calibration, AnomalyError> {
    validate(validation)?;
    let total_anomalous = validation.iter().filter(|v| v.anomalous).count() as u64;
    if total_anomalous == 0 {
        return Err(AnomalyError::NoAnomalousExamples);
    }
    let total_nominal = validation.len() as u64 - total_anomalous;

    let mut sorted = validation.to_vec();
    sorted.sort_by(|a, b| a.distance.total_cmp(&b.distance));

    // Sweep candidates ascending; at candidate v every example with
    // distance <= v is predicted nominal.
    let mut best: Option<Calibration> = None;
    let (mut anomalous_le, mut nominal_le) = (0u64, 0u64);
    let mut i = 0;
    while i < sorted.len() {
        let tau = sorted[i].distance;
        while i < sorted.len() && sorted[i].distance == tau {
            if sorted[i].anomalous {
                anomalous_le += 1;
            } else {
                nominal_le += 1;
            }
            i += 1;
        }
        let metrics = prf_from_counts(
            total_anomalous - anomalous_le,
            total_nominal - nominal_le,
            anomalous_le,
            nominal_le,
        );
        if best.is_none_or(|b| f_at_least(&metrics, &b.metrics)) {
            best = Some(Calibration {
                tau_star: tau,
                metrics,
            });
        }
    }
    Ok(best.expect("non-empty validation yields a candidate"))
}

/// Threshold from nominal statistics alone: the largest nominal distance
/// times `slack`, with the metrics that threshold achieves on the set.
pub fn nominal_fallback_threshold(
    validation: &[LabeledDistance],
    slack: f64,
) -> Result<Calibration, AnomalyError> {
    validate(validation)?;
    if !slack.is_finite() || slack < 1.0 {
        return Err(AnomalyError::InvalidThreshold(slack));
    }
    let max_nominal = validation
        .iter()
        .filter(|v| !v.anomalous)
        .map(|v| v.distance)
        .fold(0.0, f64::max);
    let tau_star = max_nominal * slack;
    let predictions: Vec<bool> = validation.iter().map(|v| v.distance > tau_star).collect();
    let labels: Vec<bool> = validation.iter().map(|v| v.anomalous).collect();
    Ok(Calibration {
        tau_star,
        metrics: prf_metrics(&predictions, &labels)?,
    })
}
