//! White-box adversarial example generation.

mod cw;
mod igsm;
mod store;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cw::{cw_l2, CwParams};
pub use igsm::{igsm, IgsmParams};
pub use store::{distortion_drift, load_results, save_results, AttackIndex, IndexEntry, StoredAttack};

use crate::data::{DataError, LabeledDataset, NUM_CLASSES};
use crate::nn::{argmax, Model, NnError};

#[derive(Debug, thiserror::Error)]
pub enum AttackError {
    #[error("invalid attack parameters: {0}")]
    InvalidParams(String),
    #[error("expected {expected} values per image, got {found}")]
    Shape { expected: usize, found: usize },
    #[error("no successful adversarial examples to average")]
    NoSuccesses,
    #[error("the C&W attack needs a target class different from the true class {0}")]
    TargetIsTrueClass(u8),
    #[error("cannot attack an empty dataset")]
    EmptyDataset,
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// A classifier whose logits can be differentiated with respect to its input.
pub trait Differentiable: Sync {
    /// Values per input image.
    fn input_len(&self) -> usize;

    /// Logits `[n, 10]` for `n` images stacked in `x`.
    fn logits(&self, x: &[f32]) -> Result<Vec<f32>, NnError>;

    /// Logits of `x` and the gradient with respect to `x` of `sum(g * logits)`,
    /// where `g = seed(logits)`.
    fn logit_gradient(
        &self,
        x: &[f32],
        seed: &mut dyn FnMut(&[f32]) -> Vec<f32>,
    ) -> Result<(Vec<f32>, Vec<f32>), NnError>;
}

impl Differentiable for Model {
    fn input_len(&self) -> usize {
        Model::input_len(self)
    }

    fn logits(&self, x: &[f32]) -> Result<Vec<f32>, NnError> {
        Ok(Model::logits(self, &self.batch(x.to_vec())?)?.into_data())
    }

    fn logit_gradient(
        &self,
        x: &[f32],
        seed: &mut dyn FnMut(&[f32]) -> Vec<f32>,
    ) -> Result<(Vec<f32>, Vec<f32>), NnError> {
        let (z, g) = self.logit_input_gradient(&self.batch(x.to_vec())?, |z| seed(z.data()))?;
        Ok((z.into_data(), g.into_data()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackSpec {
    Igsm(IgsmParams),
    Cw(CwParams),
}

impl AttackSpec {
    pub fn validate(&self) -> Result<(), AttackError> {
        match self {
            Self::Igsm(p) => p.validate(),
            Self::Cw(p) => p.validate(),
        }
    }
}

/// Which target classes a targeted attack is run against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum TargetPolicy {
    /// No target (IGSM).
    Untargeted,
    /// One attack per wrong class: nine per example.
    AllWrongClasses,
    /// One wrong class per example, drawn from a generator seeded by
    /// `seed` and the example id.
    RandomWrongClass { seed: u64 },
}

impl TargetPolicy {
    pub fn targets(&self, id: u64, label: u8) -> Vec<Option<u8>> {
        match *self {
            Self::Untargeted => vec![None],
            Self::AllWrongClasses => (0..NUM_CLASSES as u8).filter(|&t| t != label).map(Some).collect(),
            Self::RandomWrongClass { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ id.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let k = rng.gen_range(0..NUM_CLASSES as u8 - 1);
                vec![Some(if k >= label { k + 1 } else { k })]
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub id: u64,
    pub true_label: u8,
    pub target: Option<u8>,
    pub spec: AttackSpec,
    pub adversarial: Vec<f32>,
    pub success: bool,
    /// Class the attacked model assigns to the adversarial image.
    pub predicted: u8,
    pub l2_distortion: f64,
}

pub fn l2_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt()
}

/// Mean L2 distortion over the successful results.
pub fn avg_distortion(results: &[AttackResult]) -> Result<f64, AttackError> {
    let ok: Vec<f64> = results.iter().filter(|r| r.success).map(|r| r.l2_distortion).collect();
    if ok.is_empty() {
        return Err(AttackError::NoSuccesses);
    }
    Ok(ok.iter().sum::<f64>() / ok.len() as f64)
}

/// Average the successful distortions of each example over its targets, then
/// average those means over the examples with at least one success.
pub fn avg_distortion_per_example(results: &[AttackResult]) -> Result<f64, AttackError> {
    let mut per_example: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for r in results.iter().filter(|r| r.success) {
        let e = per_example.entry(r.id).or_default();
        e.0 += r.l2_distortion;
        e.1 += 1;
    }
    if per_example.is_empty() {
        return Err(AttackError::NoSuccesses);
    }
    let means: f64 = per_example.values().map(|(sum, n)| sum / *n as f64).sum();
    Ok(means / per_example.len() as f64)
}

/// Fraction of results the attacked model still classifies correctly.
pub fn adversarial_accuracy(results: &[AttackResult]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    results.iter().filter(|r| r.predicted == r.true_label).count() as f64 / results.len() as f64
}

const SUITE_BATCH: usize = 64;

pub(crate) struct Job<'a> {
    pub id: u64,
    pub image: &'a [f32],
    pub label: u8,
    pub target: Option<u8>,
}

/// Attack every example of `data`. Results come back in dataset order (and
/// target order within an example); each result depends only on its own
/// example, so the order examples are processed in does not matter.
pub fn attack_suite<M: Differentiable>(
    model: &M,
    data: &LabeledDataset,
    spec: &AttackSpec,
    policy: TargetPolicy,
) -> Result<Vec<AttackResult>, AttackError> {
    spec.validate()?;
    if data.is_empty() {
        return Err(AttackError::EmptyDataset);
    }
    if data.shape().len() != model.input_len() {
        return Err(AttackError::Shape { expected: model.input_len(), found: data.shape().len() });
    }
    if matches!(spec, AttackSpec::Cw(_)) && policy == TargetPolicy::Untargeted {
        return Err(AttackError::InvalidParams("the C&W attack is targeted; choose a target policy".into()));
    }
    let mut jobs = Vec::new();
    for i in 0..data.len() {
        let (id, label) = (data.id(i), data.label(i));
        let targets = match spec {
            AttackSpec::Igsm(_) => vec![None],
            AttackSpec::Cw(_) => policy.targets(id, label),
        };
        for target in targets {
            jobs.push(Job { id, image: data.image(i), label, target });
        }
    }
    let parts = jobs
        .par_chunks(SUITE_BATCH)
        .map(|chunk| match spec {
            AttackSpec::Igsm(p) => igsm::run(model, chunk, p),
            AttackSpec::Cw(p) => cw::run(model, chunk, p),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(parts.into_iter().flatten().collect())
}

pub(crate) fn stack(jobs: &[Job<'_>], len: usize) -> Vec<f32> {
    let mut x = Vec::with_capacity(jobs.len() * len);
    for j in jobs {
        x.extend_from_slice(j.image);
    }
    x
}

pub(crate) fn predictions(logits: &[f32]) -> Vec<u8> {
    logits.chunks_exact(NUM_CLASSES).map(|z| argmax(z) as u8).collect()
}
