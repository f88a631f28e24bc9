use serde::{Deserialize, Serialize};

use super::{l2_distance, predictions, stack, AttackError, AttackResult, AttackSpec, Differentiable, Job};
use crate::data::NUM_CLASSES;

fn default_epsilon() -> f32 {
    0.3
}
fn default_alpha() -> f32 {
    0.05
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IgsmParams {
    /// L-infinity radius around the original image.
    #[serde(default = "default_epsilon")]
    pub epsilon: f32,
    /// Step size per iteration.
    #[serde(default = "default_alpha")]
    pub alpha: f32,
    pub iterations: usize,
}

impl IgsmParams {
    pub fn new(iterations: usize) -> Self {
        Self { epsilon: default_epsilon(), alpha: default_alpha(), iterations }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        let bad = |m: String| Err(AttackError::InvalidParams(m));
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return bad(format!("epsilon {} must lie in (0, 1]", self.epsilon));
        }
        if !(self.alpha > 0.0 && self.alpha <= self.epsilon) {
            return bad(format!("alpha {} must lie in (0, epsilon]", self.alpha));
        }
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        Ok(())
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Iterative gradient sign attack on a single image.
pub fn igsm<M: Differentiable>(
    model: &M,
    image: &[f32],
    label: u8,
    params: &IgsmParams,
) -> Result<AttackResult, AttackError> {
    params.validate()?;
    if image.len() != model.input_len() {
        return Err(AttackError::Shape { expected: model.input_len(), found: image.len() });
    }
    let job = Job { id: 0, image, label, target: None };
    Ok(run(model, &[job], params)?.remove(0))
}

pub(crate) fn run<M: Differentiable>(
    model: &M,
    jobs: &[Job<'_>],
    params: &IgsmParams,
) -> Result<Vec<AttackResult>, AttackError> {
    run_observed(model, jobs, params, &mut |_| {})
}

/// As [`run`], calling `observe` with the whole batch after every step.
pub(crate) fn run_observed<M: Differentiable>(
    model: &M,
    jobs: &[Job<'_>],
    params: &IgsmParams,
    observe: &mut dyn FnMut(&[f32]),
) -> Result<Vec<AttackResult>, AttackError> {
    let len = model.input_len();
    let original = stack(jobs, len);
    let mut x = original.clone();
    let labels: Vec<u8> = jobs.iter().map(|j| j.label).collect();
    for _ in 0..params.iterations {
        // Gradient of the summed cross-entropy: softmax(z) - onehot(label).
        let mut seed = |z: &[f32]| -> Vec<f32> {
            let mut g = Vec::with_capacity(z.len());
            for (row, &y) in z.chunks_exact(NUM_CLASSES).zip(&labels) {
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                let total: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
                for (k, &v) in row.iter().enumerate() {
                    let p = (v as f64 - max).exp() / total;
                    g.push((p - if k == y as usize { 1.0 } else { 0.0 }) as f32);
                }
            }
            g
        };
        let (_, grad) = model.logit_gradient(&x, &mut seed)?;
        for ((xi, &gi), &oi) in x.iter_mut().zip(&grad).zip(&original) {
            let stepped = (*xi + params.alpha * sign(gi)).clamp(0.0, 1.0);
            *xi = stepped.clamp(oi - params.epsilon, oi + params.epsilon);
        }
        observe(&x);
    }
    let predicted = predictions(&model.logits(&x)?);
    Ok(jobs
        .iter()
        .enumerate()
        .map(|(i, job)| {
            let adversarial = x[i * len..(i + 1) * len].to_vec();
            AttackResult {
                id: job.id,
                true_label: job.label,
                target: None,
                spec: AttackSpec::Igsm(*params),
                l2_distortion: l2_distance(&adversarial, job.image),
                adversarial,
                success: predicted[i] != job.label,
                predicted: predicted[i],
            }
        })
        .collect())
}
