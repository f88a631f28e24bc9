//! KL-divergence detection of adversarial inputs between an unsanitized and
//! a sanitized model.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::nn::{argmax, predict_dataset, Model, NnError, Probs};

/// Floor applied to Q before division.
pub const Q_FLOOR: f64 = 1e-12;
const NORMALIZATION_TOLERANCE: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum DetectError {
    #[error("distributions have different lengths ({0} and {1})")]
    LengthMismatch(usize, usize),
    #[error("probability vector is empty")]
    Empty,
    #[error("probability entry {0} is negative or not a number")]
    InvalidEntry(f64),
    #[error("probabilities sum to {0}, not 1")]
    NotNormalized(f64),
    #[error("cannot calibrate on an empty list")]
    EmptyCalibration,
    #[error("target acceptance {0} must lie strictly between 0 and 1")]
    InvalidTarget(f64),
    #[error("verdict {index} is for id {verdict} but ground truth is for id {truth}")]
    IdMismatch { index: usize, verdict: u64, truth: u64 },
    #[error("{verdicts} verdicts for {truths} ground-truth entries")]
    CountMismatch { verdicts: usize, truths: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

fn check_distribution(v: &[f64]) -> Result<(), DetectError> {
    if v.is_empty() {
        return Err(DetectError::Empty);
    }
    if let Some(&x) = v.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(DetectError::InvalidEntry(x));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(DetectError::NotNormalized(sum));
    }
    Ok(())
}

/// `D_KL(P || Q) = sum_i P(i) ln(P(i) / Q(i))` in nats. Terms with `P(i) = 0`
/// contribute nothing and `Q` is floored at [`Q_FLOOR`].
pub fn kl_divergence<T: Copy + Into<f64>>(p: &[T], q: &[T]) -> Result<f64, DetectError> {
    if p.len() != q.len() {
        return Err(DetectError::LengthMismatch(p.len(), q.len()));
    }
    let p: Vec<f64> = p.iter().map(|&v| v.into()).collect();
    let q: Vec<f64> = q.iter().map(|&v| v.into()).collect();
    check_distribution(&p)?;
    check_distribution(&q)?;
    let kl: f64 =
        p.iter().zip(&q).filter(|(&pi, _)| pi > 0.0).map(|(&pi, &qi)| pi * (pi.ln() - qi.max(Q_FLOOR).ln())).sum();
    Ok(kl.max(0.0))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// From the unsanitized model's output to the sanitized model's.
    #[default]
    UnsanitizedToSanitized,
    SanitizedToUnsanitized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlRecord {
    pub id: u64,
    /// Unsanitized model output.
    pub p: Probs,
    /// Sanitized model output.
    pub q: Probs,
    pub kl: f64,
}

pub fn kl_records(unsanitized: &Model, sanitized: &Model, data: &LabeledDataset) -> Result<Vec<KlRecord>, DetectError> {
    kl_records_with(unsanitized, sanitized, data, Direction::UnsanitizedToSanitized)
}

pub fn kl_records_with(
    unsanitized: &Model,
    sanitized: &Model,
    data: &LabeledDataset,
    direction: Direction,
) -> Result<Vec<KlRecord>, DetectError> {
    let ps = predict_dataset(unsanitized, data)?;
    let qs = predict_dataset(sanitized, data)?;
    ps.into_iter()
        .zip(qs)
        .enumerate()
        .map(|(i, (p, q))| {
            let kl = match direction {
                Direction::UnsanitizedToSanitized => kl_divergence(&p, &q)?,
                Direction::SanitizedToUnsanitized => kl_divergence(&q, &p)?,
            };
            Ok(KlRecord { id: data.id(i), p, q, kl })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub kl_threshold: f64,
    pub target_accept: f64,
    /// Fraction of the calibration values at or below the threshold.
    pub achieved_accept: f64,
    pub calibration_size: usize,
    pub calibration_sha256: String,
}

/// `ceil(target * n)` with products that are integers up to rounding noise
/// (e.g. `0.98 * 100`) treated as exact.
fn order_statistic_rank(target: f64, n: usize) -> usize {
    let x = target * n as f64;
    let nearest = x.round();
    let k = if (x - nearest).abs() <= 1e-9 * x.abs().max(1.0) { nearest } else { x.ceil() };
    (k as usize).clamp(1, n)
}

/// Threshold = the k-th smallest value with `k = ceil(target * n)`, the
/// smallest order statistic that accepts at least `target` of the list.
pub fn calibrate_threshold(
    normal_kls: &[f64],
    target_accept: f64,
    calibration_sha256: &str,
) -> Result<Calibration, DetectError> {
    if normal_kls.is_empty() {
        return Err(DetectError::EmptyCalibration);
    }
    if !(target_accept > 0.0 && target_accept < 1.0) {
        return Err(DetectError::InvalidTarget(target_accept));
    }
    if let Some(&x) = normal_kls.iter().find(|x| !x.is_finite()) {
        return Err(DetectError::InvalidEntry(x));
    }
    let mut sorted = normal_kls.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = order_statistic_rank(target_accept, sorted.len());
    let threshold = sorted[k - 1];
    let accepted = sorted.iter().filter(|&&v| v <= threshold).count();
    Ok(Calibration {
        kl_threshold: threshold,
        target_accept,
        achieved_accept: accepted as f64 / sorted.len() as f64,
        calibration_size: sorted.len(),
        calibration_sha256: calibration_sha256.to_string(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Normal,
    Adversarial,
}

impl Decision {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Normal => "normal",
            Self::Adversarial => "adversarial",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub id: u64,
    pub kl: f64,
    pub decision: Decision,
    /// Sanitized-model class, for inputs judged normal.
    pub assigned_class: Option<u8>,
}

/// Reject when the divergence exceeds the threshold; otherwise classify with
/// the sanitized model.
pub fn detect(record: &KlRecord, calibration: &Calibration) -> Verdict {
    if record.kl > calibration.kl_threshold {
        Verdict { id: record.id, kl: record.kl, decision: Decision::Adversarial, assigned_class: None }
    } else {
        Verdict {
            id: record.id,
            kl: record.kl,
            decision: Decision::Normal,
            assigned_class: Some(argmax(&record.q) as u8),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub id: u64,
    pub is_adversarial: bool,
    pub true_class: u8,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rate {
    pub correct: usize,
    pub total: usize,
}

impl Rate {
    pub fn fraction(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }

    fn add(&mut self, hit: bool) {
        self.total += 1;
        self.correct += usize::from(hit);
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CombinedAccuracy {
    /// Normal inputs accepted and classified correctly.
    pub normal_accuracy: Rate,
    /// Normal inputs accepted by the detector.
    pub normal_acceptance: Rate,
    /// Adversarial inputs either rejected or classified correctly.
    pub adversarial_accuracy: Rate,
    /// Adversarial inputs rejected by the detector.
    pub detector_rate: Rate,
    /// Adversarial inputs accepted by the detector and classified correctly,
    /// as a fraction of those accepted.
    pub classifier_rate: Rate,
}

pub fn combined_accuracy(verdicts: &[Verdict], truth: &[GroundTruth]) -> Result<CombinedAccuracy, DetectError> {
    if verdicts.len() != truth.len() {
        return Err(DetectError::CountMismatch { verdicts: verdicts.len(), truths: truth.len() });
    }
    let mut acc = CombinedAccuracy::default();
    for (index, (v, t)) in verdicts.iter().zip(truth).enumerate() {
        if v.id != t.id {
            return Err(DetectError::IdMismatch { index, verdict: v.id, truth: t.id });
        }
        let accepted = v.decision == Decision::Normal;
        let classified = accepted && v.assigned_class == Some(t.true_class);
        if t.is_adversarial {
            acc.adversarial_accuracy.add(!accepted || classified);
            acc.detector_rate.add(!accepted);
            if accepted {
                acc.classifier_rate.add(classified);
            }
        } else {
            acc.normal_accuracy.add(classified);
            acc.normal_acceptance.add(accepted);
        }
    }
    Ok(acc)
}
