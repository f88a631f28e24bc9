use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use super::arch::{ArchDescriptor, LayerSpec};
use super::NnError;
use crate::autodiff::{Graph, NodeId, Reduction, Session, Tensor};
use crate::data::{LabeledDataset, NUM_CLASSES};

/// Class probabilities for one image.
pub type Probs = [f32; NUM_CLASSES];

const PREDICT_CHUNK: usize = 256;

struct Compiled {
    graph: Graph,
    logits: NodeId,
    head: NodeId,
}

fn compile(arch: &ArchDescriptor, loss: Option<Reduction>) -> Compiled {
    let mut g = Graph::new();
    let mut x = g.input("x");
    let mut param = 0;
    let last = arch.layers.len() - 1;
    for (i, layer) in arch.layers.iter().enumerate() {
        match *layer {
            LayerSpec::Conv { stride, padding, .. } => {
                let (k, b) = (g.param(param), g.param(param + 1));
                param += 2;
                x = g.conv2d(x, k, b, stride, padding);
                x = g.relu(x);
            }
            LayerSpec::MaxPool => x = g.max_pool2(x),
            LayerSpec::Dense { .. } => {
                let (w, b) = (g.param(param), g.param(param + 1));
                param += 2;
                x = g.linear(x, w, b);
                if i != last {
                    x = g.relu(x);
                }
            }
        }
        g.set_label(x, format!("layer{i}"));
    }
    let logits = x;
    g.output("logits", logits);
    let head = match loss {
        Some(reduction) => {
            let y = g.input("y");
            let l = g.softmax_cross_entropy(logits, y, reduction);
            g.output("loss", l);
            l
        }
        None => {
            let p = g.softmax(logits);
            g.output("probs", p);
            p
        }
    };
    Compiled { graph: g, logits, head }
}

/// A classifier: an architecture plus its parameters.
pub struct Model {
    arch: ArchDescriptor,
    params: Vec<Tensor>,
    infer: Compiled,
    train: Compiled,
    attack: Compiled,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self::from_params(self.arch.clone(), self.params.clone()).expect("cloned model is valid")
    }
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model").field("arch", &self.arch.name).field("params", &self.params.len()).finish()
    }
}

impl Model {
    /// Fresh model with fan-in scaled uniform weights and zero biases.
    pub fn new(arch: ArchDescriptor, seed: u64) -> Result<Self, NnError> {
        arch.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for [w_shape, b_shape] in arch.param_shapes()? {
            let fan_in: usize = w_shape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt() as f32;
            let dist = Uniform::new_inclusive(-bound, bound);
            let len = w_shape.iter().product();
            let w: Vec<f32> = (0..len).map(|_| dist.sample(&mut rng)).collect();
            params.push(Tensor::new(w_shape, w)?.with_grad(true));
            params.push(Tensor::zeros(&b_shape)?.with_grad(true));
        }
        Self::from_params(arch, params)
    }

    pub fn from_params(arch: ArchDescriptor, mut params: Vec<Tensor>) -> Result<Self, NnError> {
        arch.validate()?;
        let shapes: Vec<Vec<usize>> = arch.param_shapes()?.into_iter().flatten().collect();
        if shapes.len() != params.len() {
            return Err(NnError::ParamMismatch(format!(
                "{} tensors for {} parameter slots",
                params.len(),
                shapes.len()
            )));
        }
        for (i, (p, s)) in params.iter_mut().zip(&shapes).enumerate() {
            if p.shape() != &s[..] {
                return Err(NnError::ParamMismatch(format!("parameter {i} has shape {:?}, expected {s:?}", p.shape())));
            }
            p.set_requires_grad(true);
        }
        Ok(Self {
            infer: compile(&arch, None),
            train: compile(&arch, Some(Reduction::Mean)),
            attack: compile(&arch, Some(Reduction::Sum)),
            arch,
            params,
        })
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    /// Graph of the mean cross-entropy loss, with inputs `x` and one-hot `y`.
    pub fn loss_graph(&self) -> (&Graph, NodeId) {
        (&self.train.graph, self.train.head)
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn input_len(&self) -> usize {
        self.arch.input.len()
    }

    /// Stack `n` flat images into an NHWC batch.
    pub fn batch(&self, pixels: Vec<f32>) -> Result<Tensor, NnError> {
        let s = self.arch.input;
        if pixels.is_empty() || !pixels.len().is_multiple_of(s.len()) {
            return Err(NnError::InputShape { expected: s.len(), found: pixels.len() });
        }
        Ok(Tensor::new(vec![pixels.len() / s.len(), s.height, s.width, s.channels], pixels)?)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let mut s = Session::inference(&self.infer.graph, &self.params);
        s.forward(&[("x", x)])?;
        Ok(s.value(self.infer.logits)?.clone())
    }

    /// Softmax probabilities for a batch, `[n, classes]`.
    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let mut s = Session::inference(&self.infer.graph, &self.params);
        s.forward(&[("x", x)])?;
        Ok(s.value(self.infer.head)?.clone())
    }

    pub(crate) fn train_step(&self, x: &Tensor, y: &Tensor) -> Result<(f32, Tensor, Vec<Tensor>), NnError> {
        let mut s = Session::new(&self.train.graph, &self.params);
        s.forward(&[("x", x), ("y", y)])?;
        let loss = s.value(self.train.head)?.data()[0];
        let logits = s.value(self.train.logits)?.clone();
        let grads = s.backward(self.train.head)?;
        let grads = grads.params.into_iter().map(|g| g.expect("trainable parameter")).collect();
        Ok((loss, logits, grads))
    }

    /// Summed cross-entropy against `targets` and its gradient with respect
    /// to the input batch. Returns `(logits, loss, gradient)`.
    pub fn loss_input_gradient(&self, x: &Tensor, targets: &Tensor) -> Result<(Tensor, f32, Tensor), NnError> {
        let x = x.clone().with_grad(true);
        let mut s = Session::frozen(&self.attack.graph, &self.params);
        s.forward(&[("x", &x), ("y", targets)])?;
        let logits = s.value(self.attack.logits)?.clone();
        let loss = s.value(self.attack.head)?.data()[0];
        let mut grads = s.backward(self.attack.head)?;
        Ok((logits, loss, grads.inputs.remove("x").expect("input gradient")))
    }

    /// Logits of a batch, plus the input gradient of `seed(logits) . logits`
    /// where `seed` supplies the upstream gradient on the logits.
    pub fn logit_input_gradient(
        &self,
        x: &Tensor,
        seed: impl FnOnce(&Tensor) -> Vec<f32>,
    ) -> Result<(Tensor, Tensor), NnError> {
        let x = x.clone().with_grad(true);
        let mut s = Session::frozen(&self.infer.graph, &self.params);
        s.forward(&[("x", &x)])?;
        let logits = s.value(self.infer.logits)?.clone();
        let upstream = seed(&logits);
        let mut grads = s.backward_with(self.infer.logits, &upstream)?;
        Ok((logits, grads.inputs.remove("x").expect("input gradient")))
    }
}

/// Class probabilities for a single image.
pub fn predict(model: &Model, image: &[f32]) -> Result<Probs, NnError> {
    if image.len() != model.input_len() {
        return Err(NnError::InputShape { expected: model.input_len(), found: image.len() });
    }
    let p = model.probabilities(&model.batch(image.to_vec())?)?;
    Ok(p.data().try_into().expect("ten classes"))
}

/// Class probabilities for every image of a dataset, in dataset order.
pub fn predict_dataset(model: &Model, data: &LabeledDataset) -> Result<Vec<Probs>, NnError> {
    if data.shape() != model.arch().input {
        return Err(NnError::InputShape { expected: model.input_len(), found: data.shape().len() });
    }
    if data.is_empty() {
        return Ok(Vec::new());
    }
    let chunk = PREDICT_CHUNK * model.input_len();
    let parts = data
        .pixels()
        .par_chunks(chunk)
        .map(|pixels| {
            let p = model.probabilities(&model.batch(pixels.to_vec())?)?;
            Ok(p.data().chunks_exact(NUM_CLASSES).map(|r| r.try_into().expect("ten classes")).collect::<Vec<Probs>>())
        })
        .collect::<Result<Vec<_>, NnError>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Index of the largest probability; ties go to the lowest class.
pub fn argmax(p: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
}

impl Accuracy {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

pub fn evaluate(model: &Model, data: &LabeledDataset) -> Result<Accuracy, NnError> {
    if data.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let probs = predict_dataset(model, data)?;
    let correct = probs.iter().zip(data.labels()).filter(|(p, &l)| argmax(&p[..]) == l as usize).count();
    Ok(Accuracy { correct, total: data.len() })
}
