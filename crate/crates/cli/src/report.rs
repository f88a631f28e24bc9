//! Tables and figure series assembled from the artifacts of earlier stages.
//!
//! | file | content |
//! |------|---------|
//! | `sizes.csv` | sanitized training-set size and model accuracy per threshold |
//! | `accuracy_vs_threshold.csv` | IGSM adversarial accuracy per model; 0 iterations is clean accuracy |
//! | `distortion_vs_threshold.csv` | mean C&W L2 distortion per model and confidence |
//! | `kl_cdf.csv` | empirical CDF of the KL divergence of normal and adversarial inputs |
//! | `detection.csv` | detection accuracy per detector and attack |
//! | `combined.csv` | detector, classifier and overall accuracy per detector and attack |

use std::cmp::Ordering;
use std::path::Path;

use anyhow::{bail, Context, Result};
use sanilab::attack::{self, AttackIndex, AttackResult};
use sanilab::detect::Rate;
use sanilab::nn::Checkpoint;
use sanilab::sanitize::SanitizationReport;

use crate::artifacts::{opt, read_json, read_table, subdirs, threshold_tag, Table, UNSANITIZED};
use crate::detection::DetectionSummary;
use crate::stages::Ctx;

/// Attack directory names: `igsm-<iterations>` or `cw-k<kappa>`.
#[derive(Clone, Debug, PartialEq)]
enum AttackTag {
    Igsm(usize),
    Cw(f64),
}

impl AttackTag {
    fn parse(tag: &str) -> Option<Self> {
        if let Some(n) = tag.strip_prefix("igsm-") {
            n.parse().ok().map(Self::Igsm)
        } else {
            tag.strip_prefix("cw-k").and_then(|k| k.parse().ok()).map(Self::Cw)
        }
    }

    fn order(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Self::Igsm(a), Self::Igsm(b)) => a.cmp(b),
            (Self::Cw(a), Self::Cw(b)) => a.total_cmp(b),
            (Self::Igsm(_), Self::Cw(_)) => Ordering::Less,
            (Self::Cw(_), Self::Igsm(_)) => Ordering::Greater,
        }
    }
}

/// Threshold of a model tag; the unsanitized model trains on the full set,
/// i.e. threshold 0.
fn model_threshold(tag: &str) -> Option<f64> {
    if tag == UNSANITIZED {
        Some(0.0)
    } else {
        tag.strip_prefix("sanitized-")?.parse().ok()
    }
}

fn name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default()
}

fn frac(r: &Rate) -> String {
    opt(r.fraction())
}

/// `(model tag, threshold, [(attack, index)])`, unsanitized first, then by
/// threshold; attacks IGSM before C&W, each by parameter.
type AttackTree = Vec<(String, f64, Vec<(AttackTag, String, AttackIndex)>)>;

fn attack_tree(root: &Path) -> Result<AttackTree> {
    let mut models = Vec::new();
    for dir in subdirs(root)? {
        let tag = name(&dir);
        let Some(threshold) = model_threshold(&tag) else { continue };
        let mut attacks = Vec::new();
        for a in subdirs(&dir)? {
            let Some(kind) = AttackTag::parse(&name(&a)) else { continue };
            let path = a.join("index.json");
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let index: AttackIndex =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            attacks.push((kind, name(&a), index));
        }
        attacks.sort_by(|a, b| a.0.order(&b.0));
        if !attacks.is_empty() {
            models.push((tag, threshold, attacks));
        }
    }
    models.sort_by(|a, b| (a.0 != UNSANITIZED).cmp(&(b.0 != UNSANITIZED)).then(a.1.total_cmp(&b.1)));
    Ok(models)
}

fn results_of(index: &AttackIndex) -> Vec<AttackResult> {
    index
        .entries
        .iter()
        .map(|e| AttackResult {
            id: e.id,
            true_label: e.true_label,
            target: e.target,
            spec: e.spec,
            adversarial: Vec::new(),
            success: e.success,
            predicted: e.predicted,
            l2_distortion: e.l2_distortion,
        })
        .collect()
}

pub fn report(ctx: &Ctx) -> Result<()> {
    let attacks_root = ctx.layout.attacks();
    let tree = attack_tree(&attacks_root)?;
    if tree.is_empty() {
        bail!("nothing to report: no attack results under {}", attacks_root.display());
    }
    let out = ctx.layout.report();
    let p = &ctx.provenance;

    let mut sizes = Table::new(&["mode", "threshold", "set_size", "discarded", "test_accuracy"]);
    for t in ctx.config.thresholds() {
        let path = ctx.layout.sanitize_report(t);
        if !path.exists() {
            continue;
        }
        let r: SanitizationReport = read_json(&path)?.body;
        let model = ctx.layout.model(&threshold_tag(t));
        let accuracy = if model.exists() { Checkpoint::load(&model)?.meta.test_accuracy } else { None };
        let mode = serde_json::to_value(r.mode)?.as_str().unwrap_or_default().to_string();
        sizes.push(vec![mode, t.to_string(), r.kept.to_string(), r.discarded.to_string(), opt(accuracy)]);
    }
    sizes.write(&out.join("sizes.csv"), p)?;

    let mut accuracy = Table::new(&["model", "threshold", "igsm_iterations", "accuracy", "examples"]);
    let mut distortion = Table::new(&["model", "threshold", "kappa", "avg_distortion", "successful", "attempted"]);
    for (tag, threshold, attacks) in &tree {
        let model = ctx.layout.model(tag);
        if model.exists() {
            // Clean accuracy over the whole test set; the examples column is
            // left empty.
            let meta = Checkpoint::load(&model)?.meta;
            accuracy.push(vec![tag.clone(), threshold.to_string(), "0".into(), opt(meta.test_accuracy), String::new()]);
        }
        for (kind, _, index) in attacks {
            let results = results_of(index);
            match kind {
                AttackTag::Igsm(n) => accuracy.push(vec![
                    tag.clone(),
                    threshold.to_string(),
                    n.to_string(),
                    attack::adversarial_accuracy(&results).to_string(),
                    results.len().to_string(),
                ]),
                AttackTag::Cw(k) => distortion.push(vec![
                    tag.clone(),
                    threshold.to_string(),
                    k.to_string(),
                    opt(attack::avg_distortion_per_example(&results).ok()),
                    results.iter().filter(|r| r.success).count().to_string(),
                    results.len().to_string(),
                ]),
            }
        }
    }
    accuracy.write(&out.join("accuracy_vs_threshold.csv"), p)?;
    distortion.write(&out.join("distortion_vs_threshold.csv"), p)?;

    let mut cdf = Table::new(&["detector", "set", "kl", "cdf"]);
    let mut detection = Table::new(&[
        "detector",
        "sanitization_threshold",
        "train_set_size",
        "kl_threshold",
        "attack",
        "adversarials",
        "detection_accuracy",
        "normal_acceptance",
    ]);
    let mut combined = Table::new(&[
        "detector",
        "sanitization_threshold",
        "attack",
        "detector_accuracy",
        "classifier_accuracy",
        "overall_accuracy",
        "normal_overall_accuracy",
    ]);
    for t in ctx.config.detect_thresholds() {
        let tag = threshold_tag(t);
        let dir = ctx.layout.detect(&tag);
        let summary_path = dir.join("summary.json");
        if !summary_path.exists() {
            continue;
        }
        let s: DetectionSummary = read_json(&summary_path)?.body;
        let mut sets: Vec<(AttackTag, &str)> =
            s.attacks.iter().filter_map(|a| AttackTag::parse(&a.attack).map(|k| (k, a.attack.as_str()))).collect();
        sets.sort_by(|a, b| a.0.order(&b.0));
        let mut normal_written = false;
        for (_, attack_tag) in &sets {
            let a = s.attacks.iter().find(|a| a.attack == *attack_tag).expect("present");
            detection.push(vec![
                tag.clone(),
                t.to_string(),
                s.train_set_size.to_string(),
                s.kl_threshold.to_string(),
                a.attack.clone(),
                a.adversarials.to_string(),
                frac(&a.accuracy.detector_rate),
                frac(&s.normal.normal_acceptance),
            ]);
            combined.push(vec![
                tag.clone(),
                t.to_string(),
                a.attack.clone(),
                frac(&a.accuracy.detector_rate),
                frac(&a.accuracy.classifier_rate),
                frac(&a.accuracy.adversarial_accuracy),
                frac(&s.normal.normal_accuracy),
            ]);

            let rows = read_table(&dir.join(format!("{attack_tag}.csv")))?;
            let mut push_cdf = |set: &str, adversarial: bool| -> Result<()> {
                let mut kls = rows
                    .iter()
                    .filter(|r| r["is_adversarial"] == adversarial.to_string())
                    .map(|r| r["kl"].parse::<f64>())
                    .collect::<Result<Vec<_>, _>>()?;
                kls.sort_by(f64::total_cmp);
                let n = kls.len() as f64;
                for (i, kl) in kls.iter().enumerate() {
                    cdf.push(vec![tag.clone(), set.to_string(), kl.to_string(), ((i + 1) as f64 / n).to_string()]);
                }
                Ok(())
            };
            if !normal_written {
                push_cdf("normal", false)?;
                normal_written = true;
            }
            push_cdf(attack_tag, true)?;
        }
    }
    cdf.write(&out.join("kl_cdf.csv"), p)?;
    detection.write(&out.join("detection.csv"), p)?;
    combined.write(&out.join("combined.csv"), p)?;
    println!("report written to {}", out.display());
    Ok(())
}
