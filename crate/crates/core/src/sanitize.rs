//! Confidence scoring and threshold culling of training sets.

use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, LabeledDataset, NUM_CLASSES};
use crate::nn::{self, ArchDescriptor, Checkpoint, Model, NnError, TrainConfig};

const SCORE_CHUNK: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum SanitizeError {
    #[error("scores were computed for dataset {scored}, not {given}")]
    ScoresMismatch { scored: String, given: String },
    #[error("threshold {0} is not a finite number")]
    InvalidThreshold(f64),
    #[error("canonical set is empty")]
    EmptyCanonicalSet,
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SanitizeMode {
    Canonical,
    #[serde(rename = "self")]
    SelfScored,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub id: u64,
    pub label: u8,
    pub confidence: f64,
}

/// Per-example probability of the true class under one scoring model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceScores {
    pub model_sha256: String,
    pub dataset_sha256: String,
    pub entries: Vec<ScoreEntry>,
}

/// Score every example of `data` by the probability the model assigns to its
/// label. Probabilities are computed from the logits in double precision so
/// thresholds close to 1 remain distinguishable.
pub fn score_confidence(model: &Model, model_sha256: &str, data: &LabeledDataset) -> Result<ConfidenceScores, NnError> {
    if data.shape() != model.arch().input {
        return Err(NnError::InputShape { expected: model.input_len(), found: data.shape().len() });
    }
    let mut entries = Vec::with_capacity(data.len());
    let stride = model.input_len();
    for (c, pixels) in data.pixels().chunks(SCORE_CHUNK * stride).enumerate() {
        let logits = model.logits(&model.batch(pixels.to_vec())?)?;
        for (k, z) in logits.data().chunks_exact(NUM_CLASSES).enumerate() {
            let i = c * SCORE_CHUNK + k;
            let label = data.label(i);
            entries.push(ScoreEntry { id: data.id(i), label, confidence: true_class_probability(z, label) });
        }
    }
    Ok(ConfidenceScores { model_sha256: model_sha256.to_string(), dataset_sha256: data.sha256().to_string(), entries })
}

fn true_class_probability(logits: &[f32], label: u8) -> f64 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let total: f64 = logits.iter().map(|&z| (z as f64 - max).exp()).sum();
    ((logits[label as usize] as f64 - max).exp() / total).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SanitizationReport {
    pub mode: SanitizeMode,
    pub threshold: f64,
    pub kept: usize,
    pub discarded: usize,
    pub per_class_kept: [usize; NUM_CLASSES],
    pub scoring_model_sha256: String,
    pub source_dataset_sha256: String,
    /// The kept examples, in original order.
    pub manifest: DatasetManifest,
}

/// Keep the examples whose confidence is at least `threshold`.
pub fn cull(
    data: &LabeledDataset,
    scores: &ConfidenceScores,
    threshold: f64,
    mode: SanitizeMode,
) -> Result<(LabeledDataset, SanitizationReport), SanitizeError> {
    if !threshold.is_finite() {
        return Err(SanitizeError::InvalidThreshold(threshold));
    }
    if scores.dataset_sha256 != data.sha256() || scores.entries.len() != data.len() {
        return Err(SanitizeError::ScoresMismatch {
            scored: scores.dataset_sha256.clone(),
            given: data.sha256().to_string(),
        });
    }
    let keep: Vec<usize> =
        scores.entries.iter().enumerate().filter(|(_, e)| e.confidence >= threshold).map(|(i, _)| i).collect();
    let kept = data.subset(&keep, format!("{}-sanitized({}, threshold={threshold})", mode_name(mode), data.source()));
    let report = SanitizationReport {
        mode,
        threshold,
        kept: kept.len(),
        discarded: data.len() - kept.len(),
        per_class_kept: kept.class_counts(),
        scoring_model_sha256: scores.model_sha256.clone(),
        source_dataset_sha256: data.sha256().to_string(),
        manifest: kept.manifest().clone(),
    };
    Ok((kept, report))
}

fn mode_name(mode: SanitizeMode) -> &'static str {
    match mode {
        SanitizeMode::Canonical => "canonical",
        SanitizeMode::SelfScored => "self",
    }
}

/// Outcome of a threshold sweep. Kept sets are described by their manifests;
/// rebuild one with [`LabeledDataset::restrict_to`].
#[derive(Clone, Debug)]
pub struct Sweep {
    pub scoring_model: Checkpoint,
    pub scores: ConfidenceScores,
    /// One report per threshold, in ascending threshold order.
    pub reports: Vec<SanitizationReport>,
}

/// Score `data` once with `scoring_model` and cull at every threshold.
pub fn sweep(
    data: &LabeledDataset,
    scoring_model: Checkpoint,
    thresholds: &[f64],
    mode: SanitizeMode,
) -> Result<Sweep, SanitizeError> {
    let mut sorted = thresholds.to_vec();
    if let Some(&t) = sorted.iter().find(|t| !t.is_finite()) {
        return Err(SanitizeError::InvalidThreshold(t));
    }
    sorted.sort_by(f64::total_cmp);
    let model = scoring_model.model()?;
    let scores = score_confidence(&model, &scoring_model.sha256(), data)?;
    let mut reports = Vec::with_capacity(sorted.len());
    for t in sorted {
        let (_, report) = cull(data, &scores, t, mode)?;
        log::info!("{} sanitization at {t}: kept {} of {}", mode_name(mode), report.kept, data.len());
        reports.push(report);
    }
    Ok(Sweep { scoring_model, scores, reports })
}

/// Train the canonical model on `canonical`, then sweep `data`.
pub fn canonical_sanitize(
    data: &LabeledDataset,
    canonical: &LabeledDataset,
    thresholds: &[f64],
    arch: &ArchDescriptor,
    config: &TrainConfig,
) -> Result<Sweep, SanitizeError> {
    if canonical.is_empty() {
        return Err(SanitizeError::EmptyCanonicalSet);
    }
    let scoring = nn::train(arch, canonical, config, None)?;
    sweep(data, scoring, thresholds, SanitizeMode::Canonical)
}

/// Train a scoring model on `data` itself, then sweep `data`.
pub fn self_sanitize(
    data: &LabeledDataset,
    thresholds: &[f64],
    arch: &ArchDescriptor,
    config: &TrainConfig,
) -> Result<Sweep, SanitizeError> {
    let scoring = nn::train(arch, data, config, None)?;
    sweep(data, scoring, thresholds, SanitizeMode::SelfScored)
}
