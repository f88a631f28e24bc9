use serde::{Deserialize, Serialize};

use super::{l2_distance, predictions, AttackError, AttackResult, AttackSpec, Differentiable, Job};
use crate::data::NUM_CLASSES;

fn default_steps() -> usize {
    9
}
fn default_iterations() -> usize {
    1000
}
fn default_rate() -> f32 {
    1e-2
}
fn default_const() -> f32 {
    1e-2
}
fn yes() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CwParams {
    /// Required logit margin of the target class.
    #[serde(default)]
    pub kappa: f32,
    #[serde(default = "default_steps")]
    pub binary_search_steps: usize,
    #[serde(default = "default_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_rate")]
    pub learning_rate: f32,
    #[serde(default = "default_const")]
    pub initial_const: f32,
    /// Stop a search step once the objective stops improving.
    #[serde(default = "yes")]
    pub abort_early: bool,
}

impl Default for CwParams {
    fn default() -> Self {
        Self {
            kappa: 0.0,
            binary_search_steps: default_steps(),
            max_iterations: default_iterations(),
            learning_rate: default_rate(),
            initial_const: default_const(),
            abort_early: true,
        }
    }
}

impl CwParams {
    pub fn with_kappa(kappa: f32) -> Self {
        Self { kappa, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        let bad = |m: &str| Err(AttackError::InvalidParams(m.to_string()));
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return bad("kappa must be a non-negative number");
        }
        if self.binary_search_steps == 0 || self.max_iterations == 0 {
            return bad("binary_search_steps and max_iterations must be positive");
        }
        if !(self.learning_rate > 0.0 && self.initial_const > 0.0) {
            return bad("learning_rate and initial_const must be positive");
        }
        Ok(())
    }
}

/// Targeted Carlini & Wagner L2 attack on a single image.
pub fn cw_l2<M: Differentiable>(
    model: &M,
    image: &[f32],
    true_label: u8,
    target: u8,
    params: &CwParams,
) -> Result<AttackResult, AttackError> {
    params.validate()?;
    if image.len() != model.input_len() {
        return Err(AttackError::Shape { expected: model.input_len(), found: image.len() });
    }
    let job = Job { id: 0, image, label: true_label, target: Some(target) };
    Ok(run(model, &[job], params)?.remove(0))
}

/// `(Z_t - max_{j != t} Z_j, argmax_{j != t} Z_j)`.
fn margin(z: &[f32], target: usize) -> (f32, usize) {
    let mut other = usize::from(target == 0);
    for (j, &v) in z.iter().enumerate() {
        if j != target && v > z[other] {
            other = j;
        }
    }
    (z[target] - z[other], other)
}

/// The margin condition: at least `kappa`, and strictly positive so the
/// target is the unique argmax.
fn meets(m: f32, kappa: f32) -> bool {
    m >= kappa && m > 0.0
}

struct State {
    w0: Vec<f32>,
    delta: Vec<f32>,
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
    c: f64,
    lower: f64,
    upper: f64,
    prev: f64,
    active: bool,
    step_success: bool,
    best_l2: f64,
    best: Option<Vec<f32>>,
}

pub(crate) fn run<M: Differentiable>(
    model: &M,
    jobs: &[Job<'_>],
    params: &CwParams,
) -> Result<Vec<AttackResult>, AttackError> {
    let len = model.input_len();
    for job in jobs {
        let target = job.target.ok_or_else(|| AttackError::InvalidParams("missing target".into()))?;
        if target == job.label {
            return Err(AttackError::TargetIsTrueClass(job.label));
        }
    }
    let targets: Vec<usize> = jobs.iter().map(|j| j.target.expect("checked") as usize).collect();

    // Inputs that already meet the margin need no perturbation.
    let x0: Vec<f32> = jobs.iter().flat_map(|j| j.image.iter().copied()).collect();
    let z0 = model.logits(&x0)?;
    let mut states: Vec<State> = jobs
        .iter()
        .enumerate()
        .map(|(i, job)| {
            let done = meets(margin(&z0[i * NUM_CLASSES..(i + 1) * NUM_CLASSES], targets[i]).0, params.kappa);
            State {
                w0: job.image.iter().map(|&p| ((2.0 * p - 1.0) * 0.999_999).atanh()).collect(),
                delta: vec![0.0; len],
                m: vec![0.0; len],
                v: vec![0.0; len],
                t: 0,
                c: params.initial_const as f64,
                lower: 0.0,
                upper: 1e10,
                prev: f64::INFINITY,
                active: !done,
                step_success: false,
                best_l2: if done { 0.0 } else { f64::INFINITY },
                best: done.then(|| job.image.to_vec()),
            }
        })
        .collect();
    let pending: Vec<usize> = (0..jobs.len()).filter(|&i| states[i].active).collect();
    let check_every = (params.max_iterations / 10).max(1);

    for _ in 0..params.binary_search_steps {
        if pending.is_empty() {
            break;
        }
        for &i in &pending {
            let s = &mut states[i];
            s.delta.fill(0.0);
            s.m.fill(0.0);
            s.v.fill(0.0);
            s.t = 0;
            s.prev = f64::INFINITY;
            s.active = true;
            s.step_success = false;
        }
        for iteration in 0..params.max_iterations {
            let live: Vec<usize> = pending.iter().copied().filter(|&i| states[i].active).collect();
            if live.is_empty() {
                break;
            }
            let mut x = Vec::with_capacity(live.len() * len);
            let mut tanh = Vec::with_capacity(live.len() * len);
            for &i in &live {
                for (w, d) in states[i].w0.iter().zip(&states[i].delta) {
                    let th = (w + d).tanh();
                    tanh.push(th);
                    x.push((th + 1.0) / 2.0);
                }
            }
            let mut objective = vec![0.0f64; live.len()];
            let mut seed = |z: &[f32]| -> Vec<f32> {
                let mut g = vec![0.0f32; z.len()];
                for (k, &i) in live.iter().enumerate() {
                    let row = &z[k * NUM_CLASSES..(k + 1) * NUM_CLASSES];
                    let (m, other) = margin(row, targets[i]);
                    let hinge = (-m + params.kappa).max(0.0);
                    objective[k] = states[i].c * hinge as f64;
                    if hinge > 0.0 {
                        let c = states[i].c as f32;
                        g[k * NUM_CLASSES + other] = c;
                        g[k * NUM_CLASSES + targets[i]] = -c;
                    }
                }
                g
            };
            let (z, grad) = model.logit_gradient(&x, &mut seed)?;
            for (k, &i) in live.iter().enumerate() {
                let s = &mut states[i];
                let span = k * len..(k + 1) * len;
                let adv = &x[span.clone()];
                let image = jobs[i].image;
                let l2sq: f64 = adv.iter().zip(image).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
                let loss = l2sq + objective[k];
                let (m, _) = margin(&z[k * NUM_CLASSES..(k + 1) * NUM_CLASSES], targets[i]);
                if meets(m, params.kappa) {
                    s.step_success = true;
                    if l2sq < s.best_l2 {
                        s.best_l2 = l2sq;
                        s.best = Some(adv.to_vec());
                    }
                }
                if params.abort_early && iteration % check_every == 0 {
                    if loss > s.prev * 0.9999 {
                        s.active = false;
                        continue;
                    }
                    s.prev = loss;
                }
                // Adam step on the tanh-space perturbation.
                s.t += 1;
                let (b1, b2, eps) = (0.9f32, 0.999f32, 1e-8f32);
                let lr = params.learning_rate * (1.0 - b2.powi(s.t)).sqrt() / (1.0 - b1.powi(s.t));
                for p in 0..len {
                    let dx = 2.0 * (adv[p] - image[p]) + grad[k * len + p];
                    let g = dx * (1.0 - tanh[k * len + p].powi(2)) / 2.0;
                    s.m[p] = b1 * s.m[p] + (1.0 - b1) * g;
                    s.v[p] = b2 * s.v[p] + (1.0 - b2) * g * g;
                    s.delta[p] -= lr * s.m[p] / (s.v[p].sqrt() + eps);
                }
            }
        }
        for &i in &pending {
            let s = &mut states[i];
            if s.step_success {
                s.upper = s.upper.min(s.c);
                if s.upper < 1e9 {
                    s.c = (s.lower + s.upper) / 2.0;
                }
            } else {
                s.lower = s.lower.max(s.c);
                s.c = if s.upper < 1e9 { (s.lower + s.upper) / 2.0 } else { s.c * 10.0 };
            }
        }
    }

    let adversarial: Vec<Vec<f32>> =
        jobs.iter().zip(&states).map(|(j, s)| s.best.clone().unwrap_or_else(|| j.image.to_vec())).collect();
    let z = model.logits(&adversarial.concat())?;
    let predicted = predictions(&z);
    Ok(jobs
        .iter()
        .zip(adversarial)
        .enumerate()
        .map(|(i, (job, adv))| {
            let success = states[i].best.is_some()
                && meets(margin(&z[i * NUM_CLASSES..(i + 1) * NUM_CLASSES], targets[i]).0, params.kappa);
            AttackResult {
                id: job.id,
                true_label: job.label,
                target: job.target,
                spec: AttackSpec::Cw(*params),
                l2_distortion: l2_distance(&adv, job.image),
                adversarial: adv,
                success,
                predicted: predicted[i],
            }
        })
        .collect())
}
