//! Training, canonical augmentation, sanitization, attacks and evaluation.

use anyhow::{bail, Context, Result};
use sanilab::attack::{self, AttackSpec, TargetPolicy};
use sanilab::data::{self, DatasetManifest, LabeledDataset};
use sanilab::nn::{self, Checkpoint, TrainingMeta};
use sanilab::sanitize::{self, SanitizeMode};

use crate::artifacts::{opt, require, threshold_tag, write_json, Layout, Provenance, Table, UNSANITIZED};
use crate::config::{DatasetPath, ExperimentConfig, ModelSelection};

pub struct Ctx {
    pub config: ExperimentConfig,
    pub provenance: Provenance,
    pub layout: Layout,
}

impl Ctx {
    pub fn new(config: ExperimentConfig) -> Self {
        let provenance = Provenance { config_sha256: config.sha256(), seed: config.seed };
        let layout = Layout::new(&config.out_dir);
        Self { config, provenance, layout }
    }

    fn load_set(&self, path: &DatasetPath, limit: Option<usize>) -> Result<LabeledDataset> {
        let set = match path {
            DatasetPath::Idx { images, labels } => data::load_idx(images, labels)?,
            DatasetPath::Boxes { manifest } => {
                let (set, report) = data::preprocess_manifest(manifest)?;
                log::info!("{}: kept {} boxes, discarded {}", manifest.display(), report.kept, report.discarded);
                set
            }
        };
        Ok(match limit {
            Some(n) if n < set.len() => {
                let source = format!("{}[..{n}]", set.source());
                set.subset(&(0..n).collect::<Vec<_>>(), source)
            }
            _ => set,
        })
    }

    pub fn train_set(&self) -> Result<LabeledDataset> {
        self.load_set(&self.config.data.train, self.config.data.train_limit).context("loading training set")
    }

    pub fn test_set(&self) -> Result<LabeledDataset> {
        self.load_set(&self.config.data.test, self.config.data.test_limit).context("loading test set")
    }

    /// The test set split into a calibration part and an evaluation part.
    pub fn test_split(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        Ok(self.test_set()?.split(self.config.detect.calibration_fraction, self.config.seed)?)
    }

    /// The first `n` examples of the evaluation split.
    pub fn evaluation_prefix(&self, n: Option<usize>) -> Result<LabeledDataset> {
        let (_, eval) = self.test_split()?;
        Ok(match n {
            Some(n) if n < eval.len() => eval.subset(&(0..n).collect::<Vec<_>>(), format!("{}[..{n}]", eval.source())),
            _ => eval,
        })
    }

    pub fn checkpoint(&self, tag: &str) -> Result<Checkpoint> {
        let path = self.layout.model(tag);
        let hint = if tag == UNSANITIZED { "run `sanilab train` first" } else { "run `sanilab sanitize` first" };
        require(&path, hint)?;
        Ok(Checkpoint::load(&path)?)
    }

    fn annotate(&self, meta: &mut TrainingMeta) {
        meta.annotations.insert("config_sha256".into(), self.provenance.config_sha256.clone());
        meta.annotations.insert("seed".into(), self.provenance.seed.to_string());
    }

    fn save_checkpoint(&self, tag: &str, cp: &mut Checkpoint) -> Result<()> {
        self.annotate(&mut cp.meta);
        let path = self.layout.model(tag);
        std::fs::create_dir_all(self.layout.models())?;
        cp.save(&path)?;
        println!(
            "{tag}: {} examples, train accuracy {:.4}, test accuracy {}, sha256 {}",
            cp.meta.train_examples,
            cp.meta.train_accuracy,
            cp.meta.test_accuracy.map(|a| format!("{a:.4}")).unwrap_or_else(|| "n/a".into()),
            cp.sha256()
        );
        Ok(())
    }

    /// `(tag, threshold)` of the models selected, unsanitized first.
    pub fn models(&self, selection: ModelSelection) -> Vec<(String, Option<f64>)> {
        let mut out = Vec::new();
        if selection.includes_unsanitized() {
            out.push((UNSANITIZED.to_string(), None));
        }
        if selection.includes_sanitized() {
            out.extend(self.config.thresholds().into_iter().map(|t| (threshold_tag(t), Some(t))));
        }
        out
    }
}

pub fn train(ctx: &Ctx) -> Result<()> {
    let train = ctx.train_set()?;
    let test = ctx.test_set()?;
    let mut cp = nn::train(&ctx.config.arch.descriptor(), &train, &ctx.config.train_config(), Some(&test))?;
    ctx.save_checkpoint(UNSANITIZED, &mut cp)
}

pub fn augment_canonical(ctx: &Ctx) -> Result<()> {
    let Some(glyphs) = &ctx.config.data.canonical_glyphs else {
        return Err(crate::config::ConfigError::Invalid {
            at: "data.canonical_glyphs".into(),
            message: "augment-canonical needs a canonical glyph directory".into(),
        }
        .into());
    };
    let base = data::load_glyph_dir(glyphs)?;
    let c = &ctx.config.canonical;
    let set = data::augment_canonical(&base, &c.scales, &c.rotations)?;
    let dir = ctx.layout.canonical();
    std::fs::create_dir_all(&dir)?;
    data::save_idx_f32(&set, &dir.join("images.idx"), &dir.join("labels.idx"))?;
    write_json(&dir.join("manifest.json"), &ctx.provenance, set.manifest())?;
    let counts = base.class_counts();
    println!(
        "canonical set: {} base glyphs (fewest per digit: {}), {} augmented examples, sha256 {}",
        base.len(),
        counts.iter().min().copied().unwrap_or(0),
        set.len(),
        set.sha256()
    );
    Ok(())
}

fn load_canonical(ctx: &Ctx) -> Result<LabeledDataset> {
    let dir = ctx.layout.canonical();
    let manifest_path = dir.join("manifest.json");
    require(&manifest_path, "run `sanilab augment-canonical` first")?;
    let manifest = crate::artifacts::read_json::<DatasetManifest>(&manifest_path)?.body;
    let set = data::load_idx(&dir.join("images.idx"), &dir.join("labels.idx"))?;
    if set.sha256() != manifest.sha256 {
        bail!("canonical set in {} does not match its manifest; rerun `sanilab augment-canonical`", dir.display());
    }
    Ok(set)
}

pub fn sanitize(ctx: &Ctx) -> Result<()> {
    let train = ctx.train_set()?;
    let test = ctx.test_set()?;
    let mode = ctx.config.sanitize.mode;
    let scoring = match mode {
        SanitizeMode::SelfScored => {
            let cp = ctx.checkpoint(UNSANITIZED)?;
            if cp.meta.train_dataset_sha256 != train.sha256() {
                bail!("the unsanitized model was trained on a different training set; rerun `sanilab train`");
            }
            cp
        }
        SanitizeMode::Canonical => {
            let canonical = load_canonical(ctx)?;
            let arch = ctx.config.canonical.arch.descriptor();
            let mut cp = nn::train(&arch, &canonical, &ctx.config.canonical_train_config(), Some(&test))?;
            ctx.save_checkpoint("canonical", &mut cp)?;
            cp
        }
    };
    let sweep = sanitize::sweep(&train, scoring, &ctx.config.thresholds(), mode)?;

    let mut header = vec!["threshold", "mode", "set_size", "discarded", "test_accuracy"];
    const CLASSES: [&str; 10] =
        ["class_0", "class_1", "class_2", "class_3", "class_4", "class_5", "class_6", "class_7", "class_8", "class_9"];
    header.extend(CLASSES);
    let mut sizes = Table::new(&header);
    let arch = ctx.config.arch.descriptor();
    for report in &sweep.reports {
        write_json(&ctx.layout.sanitize_report(report.threshold), &ctx.provenance, report)?;
        let kept = train.restrict_to(&report.manifest)?;
        let accuracy = if kept.is_empty() {
            log::warn!("threshold {} discards every example; no model trained", report.threshold);
            None
        } else {
            let mut cp = nn::train(&arch, &kept, &ctx.config.train_config(), Some(&test))?;
            ctx.save_checkpoint(&threshold_tag(report.threshold), &mut cp)?;
            cp.meta.test_accuracy
        };
        let mut row = vec![
            report.threshold.to_string(),
            serde_json::to_value(mode)?.as_str().unwrap_or_default().to_string(),
            report.kept.to_string(),
            report.discarded.to_string(),
            opt(accuracy),
        ];
        row.extend(report.per_class_kept.iter().map(|c| c.to_string()));
        sizes.push(row);
    }
    sizes.write(&ctx.layout.sanitize().join("sizes.csv"), &ctx.provenance)?;
    Ok(())
}

pub fn igsm_tag(iterations: usize) -> String {
    format!("igsm-{iterations}")
}

pub fn cw_tag(kappa: f32) -> String {
    format!("cw-k{kappa}")
}

pub fn attack(ctx: &Ctx) -> Result<()> {
    let examples = ctx.evaluation_prefix(Some(ctx.config.attack.examples))?;
    let a = &ctx.config.attack;
    let mut jobs: Vec<(String, Option<f64>, String, AttackSpec, TargetPolicy)> = Vec::new();
    for &n in &a.igsm.iterations {
        for (tag, t) in ctx.models(a.igsm.models) {
            jobs.push((tag, t, igsm_tag(n), AttackSpec::Igsm(a.igsm.params(n)), TargetPolicy::Untargeted));
        }
    }
    for &k in &a.cw.kappas {
        for (tag, t) in ctx.models(a.cw.models) {
            jobs.push((tag, t, cw_tag(k), AttackSpec::Cw(a.cw.params(k)), a.cw.policy(ctx.config.seed)));
        }
    }
    for (model_tag, threshold, attack_tag, spec, policy) in jobs {
        if let Some(t) = threshold {
            if culled_everything(ctx, t)? {
                log::warn!("{model_tag}: no model, its threshold discards every example; skipped");
                continue;
            }
        }
        let cp = ctx.checkpoint(&model_tag)?;
        let model = cp.model()?;
        let results = attack::attack_suite(&model, &examples, &spec, policy)?;
        let dir = ctx.layout.attack(&model_tag, &attack_tag);
        attack::save_results(&dir, &results, &examples, &cp.sha256(), policy)?;
        write_json(&dir.join("provenance.json"), &ctx.provenance, &spec)?;
        let successes = results.iter().filter(|r| r.success).count();
        println!(
            "{model_tag} {attack_tag}: {successes}/{} successful, adversarial accuracy {:.4}, mean distortion {}",
            results.len(),
            attack::adversarial_accuracy(&results),
            attack::avg_distortion_per_example(&results).map(|d| format!("{d:.4}")).unwrap_or_else(|_| "n/a".into())
        );
    }
    Ok(())
}

/// Whether sanitization at `t` left nothing to train on.
fn culled_everything(ctx: &Ctx, t: f64) -> Result<bool> {
    let path = ctx.layout.sanitize_report(t);
    if !path.exists() {
        return Ok(false);
    }
    let report: sanitize::SanitizationReport = crate::artifacts::read_json(&path)?.body;
    Ok(report.kept == 0)
}

pub fn evaluate(ctx: &Ctx) -> Result<()> {
    let test = ctx.test_set()?;
    let mut table = Table::new(&["model", "threshold", "train_examples", "test_accuracy", "checkpoint_sha256"]);
    let mut tags = vec![(UNSANITIZED.to_string(), None), ("canonical".to_string(), None)];
    tags.extend(ctx.models(ModelSelection::Sanitized));
    for (tag, threshold) in tags {
        let path = ctx.layout.model(&tag);
        if !path.exists() {
            continue;
        }
        let cp = Checkpoint::load(&path)?;
        let model = cp.model()?;
        if model.arch().input != test.shape() {
            log::info!("{tag}: input shape differs from the test set; skipped");
            continue;
        }
        let acc = nn::evaluate(&model, &test)?;
        println!("{tag}: test accuracy {:.4} ({}/{})", acc.fraction(), acc.correct, acc.total);
        table.push(vec![
            tag,
            opt(threshold),
            cp.meta.train_examples.to_string(),
            acc.fraction().to_string(),
            cp.sha256(),
        ]);
    }
    if table.len() == 0 {
        bail!("no checkpoints under {}; run `sanilab train` first", ctx.layout.models().display());
    }
    table.write(&ctx.layout.evaluate(), &ctx.provenance)
}
