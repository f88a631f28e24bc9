//! Central-difference gradient verification in double precision.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::{AutodiffError, Session, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference half step.
    pub epsilon: f64,
    /// Pass/fail bound on the maximum relative error.
    pub tolerance: f64,
    /// Coordinates checked per tensor; `None` checks every coordinate.
    pub coords_per_tensor: Option<usize>,
    /// Seed for coordinate sampling.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { epsilon: 1e-4, tolerance: 1e-4, coords_per_tensor: None, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest error, e.g. `param:3[17]`.
    pub worst: Option<String>,
    pub checked: usize,
    /// Coordinates whose probe crossed a relu or max-pool switch and were
    /// therefore not differentiable at this point.
    pub skipped_kinks: usize,
    pub passed: bool,
}

enum Target {
    Param(usize),
    Input(String),
}

/// Compare analytic gradients of the scalar `loss` against central
/// differences. Both sides are evaluated in `f64`.
pub fn grad_check(
    graph: &Graph,
    params: &[Tensor<f32>],
    inputs: &[(&str, &Tensor<f32>)],
    loss: NodeId,
    config: &GradCheckConfig,
) -> Result<GradCheckReport, AutodiffError> {
    let mut params64: Vec<Tensor<f64>> = params.iter().map(Tensor::cast).collect();
    let mut inputs64: Vec<(String, Tensor<f64>)> = inputs.iter().map(|(n, t)| (n.to_string(), t.cast())).collect();

    let analytic = {
        let bound: Vec<(&str, &Tensor<f64>)> = inputs64.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut session = Session::new(graph, &params64);
        session.forward(&bound)?;
        session.backward(loss)?
    };

    let mut targets = Vec::new();
    for (i, p) in params64.iter().enumerate() {
        if p.requires_grad() {
            targets.push(Target::Param(i));
        }
    }
    for (name, t) in &inputs64 {
        if t.requires_grad() {
            targets.push(Target::Input(name.clone()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0, skipped_kinks: 0, passed: true };
    let baseline = probe(graph, &params64, &inputs64, loss)?.1;

    for target in targets {
        let (label, len, grad) = match &target {
            Target::Param(i) => (format!("param:{i}"), params64[*i].len(), analytic.param(*i).expect("param grad")),
            Target::Input(name) => {
                let len = inputs64.iter().find(|(n, _)| n == name).map(|(_, t)| t.len()).unwrap_or(0);
                (format!("input:{name}"), len, analytic.input(name).expect("input grad"))
            }
        };
        let coords: Vec<usize> = match config.coords_per_tensor {
            Some(k) if k < len => sample(&mut rng, len, k).into_vec(),
            _ => (0..len).collect(),
        };
        for c in coords {
            let mut evaluate = |delta: f64| -> Result<(f64, u64), AutodiffError> {
                let slot = coordinate(&target, &mut params64, &mut inputs64, c);
                let original = *slot;
                *slot = original + delta;
                let out = probe(graph, &params64, &inputs64, loss);
                *coordinate(&target, &mut params64, &mut inputs64, c) = original;
                out
            };
            let (plus, sig_plus) = evaluate(config.epsilon)?;
            let (minus, sig_minus) = evaluate(-config.epsilon)?;
            if sig_plus != baseline || sig_minus != baseline {
                report.skipped_kinks += 1;
                continue;
            }
            let fd = (plus - minus) / (2.0 * config.epsilon);
            let a = grad.data()[c];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(format!("{label}[{c}]"));
            }
        }
    }
    report.passed = report.max_rel_error < config.tolerance;
    Ok(report)
}

fn coordinate<'a>(
    target: &Target,
    params: &'a mut [Tensor<f64>],
    inputs: &'a mut [(String, Tensor<f64>)],
    c: usize,
) -> &'a mut f64 {
    match target {
        Target::Param(i) => &mut params[*i].data_mut()[c],
        Target::Input(name) => &mut inputs.iter_mut().find(|(n, _)| n == name).expect("input").1.data_mut()[c],
    }
}

/// Loss value and the activation-pattern signature of one forward pass.
fn probe(
    graph: &Graph,
    params: &[Tensor<f64>],
    inputs: &[(String, Tensor<f64>)],
    loss: NodeId,
) -> Result<(f64, u64), AutodiffError> {
    let bound: Vec<(&str, &Tensor<f64>)> = inputs.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let mut session = Session::inference(graph, params);
    session.forward(&bound)?;
    let value = session.value(loss)?;
    if value.len() != 1 {
        return Err(AutodiffError::NonScalarLoss {
            node: graph.label(loss).to_string(),
            shape: value.shape().to_vec(),
        });
    }
    Ok((value.data()[0], session.kink_signature()))
}
