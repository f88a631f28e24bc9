//! Threshold calibration and detection runs.

use anyhow::{bail, Result};
use sanilab::attack::{self, AttackResult};
use sanilab::data::LabeledDataset;
use sanilab::detect::{
    self, calibrate_threshold, combined_accuracy, kl_records_with, Calibration, CombinedAccuracy, Direction,
    GroundTruth, KlRecord, Rate, Verdict,
};
use sanilab::nn::Model;
use serde::{Deserialize, Serialize};

use crate::artifacts::{opt, read_json, require, subdirs, threshold_tag, write_json, Table, UNSANITIZED};
use crate::config::AttackedModel;
use crate::stages::Ctx;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibrationArtifact {
    pub calibration: Calibration,
    pub direction: Direction,
    pub unsanitized_sha256: String,
    pub sanitized_sha256: String,
    pub records: Vec<KlRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackDetection {
    pub attack: String,
    pub attacked_model: String,
    /// Attack runs, including unsuccessful ones.
    pub attempted: usize,
    /// Successful adversarial examples shown to the detector.
    pub adversarials: usize,
    pub accuracy: CombinedAccuracy,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub detector: String,
    pub sanitization_threshold: f64,
    pub train_set_size: usize,
    pub kl_threshold: f64,
    pub normal: CombinedAccuracy,
    pub attacks: Vec<AttackDetection>,
}

pub fn calibrate(ctx: &Ctx) -> Result<()> {
    let (calibration_set, _) = ctx.test_split()?;
    let unsanitized = ctx.checkpoint(UNSANITIZED)?;
    let u = unsanitized.model()?;
    let direction = ctx.config.detect.direction;
    for t in ctx.config.detect_thresholds() {
        let tag = threshold_tag(t);
        let sanitized = ctx.checkpoint(&tag)?;
        let records = kl_records_with(&u, &sanitized.model()?, &calibration_set, direction)?;
        let kls: Vec<f64> = records.iter().map(|r| r.kl).collect();
        let calibration = calibrate_threshold(&kls, ctx.config.detect.target_accept, calibration_set.sha256())?;
        println!(
            "{tag}: KL threshold {:.6} accepts {:.4} of {} calibration examples",
            calibration.kl_threshold, calibration.achieved_accept, calibration.calibration_size
        );
        let artifact = CalibrationArtifact {
            calibration,
            direction,
            unsanitized_sha256: unsanitized.sha256(),
            sanitized_sha256: sanitized.sha256(),
            records,
        };
        write_json(&ctx.layout.calibration(&tag), &ctx.provenance, &artifact)?;
    }
    Ok(())
}

fn records_for(u: &Model, s: &Model, set: &LabeledDataset, direction: Direction) -> Result<Vec<KlRecord>> {
    Ok(kl_records_with(u, s, set, direction)?)
}

fn fraction(r: &Rate) -> String {
    r.fraction().map(|f| format!("{f:.4}")).unwrap_or_else(|| "n/a".into())
}

pub fn detect(ctx: &Ctx) -> Result<()> {
    let (calibration_set, _) = ctx.test_split()?;
    let normals = ctx.evaluation_prefix(ctx.config.detect.normal_examples)?;
    let unsanitized = ctx.checkpoint(UNSANITIZED)?;
    let u = unsanitized.model()?;
    let direction = ctx.config.detect.direction;
    for t in ctx.config.detect_thresholds() {
        let tag = threshold_tag(t);
        let path = ctx.layout.calibration(&tag);
        require(&path, "run `sanilab calibrate` first")?;
        let cal: CalibrationArtifact = read_json(&path)?.body;
        let sanitized = ctx.checkpoint(&tag)?;
        if cal.calibration.calibration_sha256 != calibration_set.sha256()
            || cal.unsanitized_sha256 != unsanitized.sha256()
            || cal.sanitized_sha256 != sanitized.sha256()
            || cal.direction != direction
        {
            bail!("{} is stale for the current models or data; rerun `sanilab calibrate`", path.display());
        }
        let s = sanitized.model()?;

        let normal_records = records_for(&u, &s, &normals, direction)?;
        let normal_verdicts: Vec<Verdict> =
            normal_records.iter().map(|r| detect::detect(r, &cal.calibration)).collect();
        let normal_truth: Vec<GroundTruth> = (0..normals.len())
            .map(|i| GroundTruth { id: normals.id(i), is_adversarial: false, true_class: normals.label(i) })
            .collect();
        let normal = combined_accuracy(&normal_verdicts, &normal_truth)?;
        println!(
            "{tag}: KL threshold {:.6}, normal acceptance {}, normal overall {}",
            cal.calibration.kl_threshold,
            fraction(&normal.normal_acceptance),
            fraction(&normal.normal_accuracy)
        );

        let attacked_tag = match ctx.config.detect.attacked_model {
            AttackedModel::Unsanitized => UNSANITIZED.to_string(),
            AttackedModel::Sanitized => tag.clone(),
        };
        let attack_root = ctx.layout.attacks().join(&attacked_tag);
        let dirs = subdirs(&attack_root)?;
        if dirs.is_empty() {
            bail!("no attack results under {}; run `sanilab attack` first", attack_root.display());
        }
        let out_dir = ctx.layout.detect(&tag);
        let mut attacks = Vec::new();
        for dir in dirs {
            let attack_tag = dir.file_name().unwrap().to_string_lossy().to_string();
            let stored = attack::load_results(&dir)?;
            let successful: Vec<AttackResult> = stored.results.iter().filter(|r| r.success).cloned().collect();
            let mut verdicts = normal_verdicts.clone();
            let mut truth = normal_truth.clone();
            if !successful.is_empty() {
                let adv = LabeledDataset::new(
                    stored.index.shape,
                    successful.iter().flat_map(|r| r.adversarial.iter().copied()).collect(),
                    successful.iter().map(|r| r.true_label).collect(),
                    (0..successful.len() as u64).collect(),
                    attack_tag.clone(),
                )?;
                for (mut record, r) in records_for(&u, &s, &adv, direction)?.into_iter().zip(&successful) {
                    record.id = r.id;
                    verdicts.push(detect::detect(&record, &cal.calibration));
                    truth.push(GroundTruth { id: r.id, is_adversarial: true, true_class: r.true_label });
                }
            }
            let accuracy = combined_accuracy(&verdicts, &truth)?;

            let mut table = Table::new(&["id", "kl", "decision", "assigned_class", "is_adversarial", "true_class"]);
            for (v, g) in verdicts.iter().zip(&truth) {
                table.push(vec![
                    v.id.to_string(),
                    v.kl.to_string(),
                    v.decision.as_str().to_string(),
                    opt(v.assigned_class),
                    g.is_adversarial.to_string(),
                    g.true_class.to_string(),
                ]);
            }
            table.write(&out_dir.join(format!("{attack_tag}.csv")), &ctx.provenance)?;
            println!(
                "{tag} vs {attacked_tag} {attack_tag}: {} adversarials, detector {}, classifier {}, overall {}",
                successful.len(),
                fraction(&accuracy.detector_rate),
                fraction(&accuracy.classifier_rate),
                fraction(&accuracy.adversarial_accuracy)
            );
            attacks.push(AttackDetection {
                attack: attack_tag,
                attacked_model: attacked_tag.clone(),
                attempted: stored.results.len(),
                adversarials: successful.len(),
                accuracy,
            });
        }
        let summary = DetectionSummary {
            detector: tag.clone(),
            sanitization_threshold: t,
            train_set_size: sanitized.meta.train_examples,
            kl_threshold: cal.calibration.kl_threshold,
            normal,
            attacks,
        };
        write_json(&out_dir.join("summary.json"), &ctx.provenance, &summary)?;
    }
    Ok(())
}
