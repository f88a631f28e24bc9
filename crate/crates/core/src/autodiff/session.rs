use std::collections::{BTreeMap, HashMap};

use super::graph::{Graph, NodeId, Op, Reduction};
use super::kernels::{self, ConvGeometry};
use super::{AutodiffError, Scalar, Tensor};

enum Cache<T> {
    None,
    Cols(Vec<T>, ConvGeometry),
    Argmax(Vec<u32>),
    Probs(Vec<T>),
}

/// Gradients produced by a backward pass.
#[derive(Clone, Debug)]
pub struct Gradients<T: Scalar = f32> {
    /// One slot per parameter; `None` when the parameter does not require grad.
    pub params: Vec<Option<Tensor<T>>>,
    /// Gradients of inputs bound with `requires_grad`.
    pub inputs: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn input(&self, name: &str) -> Option<&Tensor<T>> {
        self.inputs.get(name)
    }

    pub fn param(&self, index: usize) -> Option<&Tensor<T>> {
        self.params.get(index).and_then(Option::as_ref)
    }
}

/// One evaluation of a [`Graph`] against a parameter set.
///
/// A session borrows the graph and parameters immutably, so any number of
/// sessions over the same trained parameters can run side by side.
pub struct Session<'a, T: Scalar = f32> {
    graph: &'a Graph,
    params: &'a [Tensor<T>],
    inputs: HashMap<String, &'a Tensor<T>>,
    values: Vec<Option<Tensor<T>>>,
    cache: Vec<Cache<T>>,
    needs_grad: Vec<bool>,
    grad_enabled: bool,
    params_frozen: bool,
    evaluated: bool,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(graph: &'a Graph, params: &'a [Tensor<T>]) -> Self {
        Self {
            graph,
            params,
            inputs: HashMap::new(),
            values: Vec::new(),
            cache: Vec::new(),
            needs_grad: Vec::new(),
            grad_enabled: true,
            params_frozen: false,
            evaluated: false,
        }
    }

    /// Session that treats every parameter as a constant, so backward only
    /// produces input gradients.
    pub fn frozen(graph: &'a Graph, params: &'a [Tensor<T>]) -> Self {
        Self { params_frozen: true, ..Self::new(graph, params) }
    }

    /// Session that never back-propagates; skips the caches backward needs.
    pub fn inference(graph: &'a Graph, params: &'a [Tensor<T>]) -> Self {
        Self { grad_enabled: false, ..Self::new(graph, params) }
    }

    pub fn graph(&self) -> &Graph {
        self.graph
    }

    /// Evaluate every node given the named inputs.
    pub fn forward(&mut self, inputs: &[(&str, &'a Tensor<T>)]) -> Result<(), AutodiffError> {
        let graph = self.graph;
        self.evaluated = false;
        self.inputs = inputs.iter().map(|&(name, t)| (name.to_string(), t)).collect();
        self.values = Vec::with_capacity(graph.len());
        self.cache = Vec::with_capacity(graph.len());
        self.needs_grad = Vec::with_capacity(graph.len());
        for id in graph.node_ids() {
            let op = graph.op(id);
            let needs = match op {
                Op::Input { name } => {
                    let t = self.inputs.get(name).ok_or_else(|| AutodiffError::MissingInput(name.clone()))?;
                    t.requires_grad()
                }
                Op::Param { index } => {
                    let p = self.params.get(*index).ok_or_else(|| AutodiffError::MissingParam {
                        node: graph.label(id).to_string(),
                        index: *index,
                    })?;
                    p.requires_grad() && !self.params_frozen
                }
                other => other.operands().iter().any(|o| self.needs_grad[o.0]),
            };
            let needs = needs && self.grad_enabled;
            self.needs_grad.push(needs);
            let (value, cache) = self.eval(id)?;
            self.values.push(value);
            self.cache.push(cache);
        }
        self.evaluated = true;
        Ok(())
    }

    /// Value of a node after [`Session::forward`].
    pub fn value(&self, id: NodeId) -> Result<&Tensor<T>, AutodiffError> {
        if id.0 >= self.values.len() {
            return Err(AutodiffError::NotEvaluated);
        }
        Ok(self.value_unchecked(id))
    }

    pub fn output(&self, name: &str) -> Result<&Tensor<T>, AutodiffError> {
        let id = self.graph.output_id(name).ok_or_else(|| AutodiffError::UnknownOutput(name.to_string()))?;
        self.value(id)
    }

    /// All named outputs of the graph.
    pub fn outputs(&self) -> Result<BTreeMap<String, &Tensor<T>>, AutodiffError> {
        self.graph.outputs().iter().map(|(name, id)| Ok((name.clone(), self.value(*id)?))).collect()
    }

    fn value_unchecked(&self, id: NodeId) -> &Tensor<T> {
        match self.graph.op(id) {
            Op::Input { name } => self.inputs[name],
            Op::Param { index } => &self.params[*index],
            _ => self.values[id.0].as_ref().expect("computed node has a value"),
        }
    }

    fn mismatch(&self, id: NodeId, detail: String) -> AutodiffError {
        AutodiffError::ShapeMismatch { node: self.graph.label(id).to_string(), detail }
    }

    fn eval(&self, id: NodeId) -> Result<(Option<Tensor<T>>, Cache<T>), AutodiffError> {
        let op = self.graph.op(id);
        let keep = self.needs_grad[id.0];
        let (value, cache) = match *op {
            Op::Input { .. } | Op::Param { .. } => return Ok((None, Cache::None)),
            Op::Conv2d { input, kernel, bias, stride, padding } => {
                let (x, k, b) = (self.value_unchecked(input), self.value_unchecked(kernel), self.value_unchecked(bias));
                let (xs, ks) = (x.shape(), k.shape());
                if xs.len() != 4 || ks.len() != 4 {
                    return Err(
                        self.mismatch(id, format!("conv2d expects rank-4 input and kernel, got {xs:?} and {ks:?}"))
                    );
                }
                if ks[1] != ks[2] || ks[3] != xs[3] {
                    return Err(self.mismatch(id, format!("kernel {ks:?} incompatible with input {xs:?}")));
                }
                if b.shape() != [ks[0]] {
                    return Err(self.mismatch(id, format!("bias {:?} should be [{}]", b.shape(), ks[0])));
                }
                if ks[1] > xs[1] + 2 * padding || ks[1] > xs[2] + 2 * padding {
                    return Err(self.mismatch(id, format!("kernel {} larger than padded input {xs:?}", ks[1])));
                }
                let g = ConvGeometry {
                    batch: xs[0],
                    height: xs[1],
                    width: xs[2],
                    channels: xs[3],
                    out_channels: ks[0],
                    kernel: ks[1],
                    stride,
                    padding,
                };
                let (out, cols) = kernels::conv2d_forward(x.data(), k.data(), b.data(), &g);
                let shape = vec![g.batch, g.out_height(), g.out_width(), g.out_channels];
                let cache =
                    if keep && self.needs_grad[kernel.0] { Cache::Cols(cols, g) } else { Cache::Cols(Vec::new(), g) };
                (Tensor::new(shape, out)?, cache)
            }
            Op::MaxPool2 { input } => {
                let x = self.value_unchecked(input);
                let s = x.shape();
                if s.len() != 4 || s[1] < 2 || s[2] < 2 {
                    return Err(self.mismatch(id, format!("maxpool2d expects [n, h>=2, w>=2, c], got {s:?}")));
                }
                let (out, arg) = kernels::max_pool2_forward(x.data(), s[0], s[1], s[2], s[3]);
                let shape = vec![s[0], s[1] / 2, s[2] / 2, s[3]];
                (Tensor::new(shape, out)?, Cache::Argmax(arg))
            }
            Op::Relu { input } => {
                let x = self.value_unchecked(input);
                (Tensor::new(x.shape().to_vec(), kernels::relu_forward(x.data()))?, Cache::None)
            }
            Op::Linear { input, weight, bias } => {
                let (x, w, b) = (self.value_unchecked(input), self.value_unchecked(weight), self.value_unchecked(bias));
                let n = x.shape()[0];
                let d = x.len() / n;
                if w.shape().len() != 2 || w.shape()[1] != d {
                    return Err(
                        self.mismatch(id, format!("weight {:?} incompatible with input {:?}", w.shape(), x.shape()))
                    );
                }
                let out = w.shape()[0];
                if b.shape() != [out] {
                    return Err(self.mismatch(id, format!("bias {:?} should be [{out}]", b.shape())));
                }
                let y = kernels::linear_forward(x.data(), w.data(), b.data(), n, d, out);
                (Tensor::new(vec![n, out], y)?, Cache::None)
            }
            Op::Softmax { input } => {
                let x = self.value_unchecked(input);
                if x.shape().len() != 2 {
                    return Err(self.mismatch(id, format!("softmax expects [n, k], got {:?}", x.shape())));
                }
                let y = kernels::softmax_rows(x.data(), x.shape()[1]);
                (Tensor::new(x.shape().to_vec(), y)?, Cache::None)
            }
            Op::SoftmaxCrossEntropy { logits, target, reduction } => {
                let (z, t) = (self.value_unchecked(logits), self.value_unchecked(target));
                if z.shape().len() != 2 || z.shape() != t.shape() {
                    return Err(self.mismatch(id, format!("logits {:?} vs target {:?}", z.shape(), t.shape())));
                }
                let (mut loss, probs) = kernels::softmax_cross_entropy(z.data(), t.data(), z.shape()[1]);
                if reduction == Reduction::Mean {
                    loss = loss / T::from_f64(z.shape()[0] as f64);
                }
                (Tensor::scalar(loss), Cache::Probs(probs))
            }
            Op::Mul { lhs, rhs } => {
                let (a, b) = (self.value_unchecked(lhs), self.value_unchecked(rhs));
                if a.shape() != b.shape() {
                    return Err(self.mismatch(id, format!("operands {:?} and {:?}", a.shape(), b.shape())));
                }
                let y = a.data().iter().zip(b.data()).map(|(&p, &q)| p * q).collect();
                (Tensor::new(a.shape().to_vec(), y)?, Cache::None)
            }
            Op::Sum { input } => {
                let x = self.value_unchecked(input);
                (Tensor::scalar(x.data().iter().copied().sum()), Cache::None)
            }
        };
        Ok((Some(value), cache))
    }

    /// Back-propagate from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, AutodiffError> {
        if !self.evaluated {
            return Err(AutodiffError::NotEvaluated);
        }
        let value = self.value(loss)?;
        if value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                node: self.graph.label(loss).to_string(),
                shape: value.shape().to_vec(),
            });
        }
        self.backward_with(loss, &[T::one()])
    }

    /// Back-propagate an explicit upstream gradient `seed` from `node`.
    pub fn backward_with(&self, node: NodeId, seed: &[T]) -> Result<Gradients<T>, AutodiffError> {
        if !self.evaluated {
            return Err(AutodiffError::NotEvaluated);
        }
        if !self.grad_enabled {
            return Err(AutodiffError::GradDisabled);
        }
        let start = self.value(node)?;
        if start.len() != seed.len() {
            return Err(self.mismatch(node, format!("seed of length {} for value {:?}", seed.len(), start.shape())));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; node.0 + 1];
        grads[node.0] = Some(seed.to_vec());
        for idx in (0..=node.0).rev() {
            let id = NodeId(idx);
            if !self.needs_grad[idx] {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match *self.graph.op(id) {
                Op::Input { .. } | Op::Param { .. } => {
                    grads[idx] = Some(g);
                }
                Op::Conv2d { input, kernel, bias, .. } => {
                    let Cache::Cols(cols, geom) = &self.cache[idx] else { unreachable!("conv cache") };
                    let need = [self.needs_grad[input.0], self.needs_grad[kernel.0], self.needs_grad[bias.0]];
                    let k = self.value_unchecked(kernel);
                    let cg = kernels::conv2d_backward(&g, cols, k.data(), geom, need);
                    accumulate(&mut grads, input, cg.input);
                    accumulate(&mut grads, kernel, cg.kernel);
                    accumulate(&mut grads, bias, cg.bias);
                }
                Op::MaxPool2 { input } => {
                    let Cache::Argmax(arg) = &self.cache[idx] else { unreachable!("pool cache") };
                    let len = self.value_unchecked(input).len();
                    accumulate(&mut grads, input, Some(kernels::max_pool2_backward(&g, arg, len)));
                }
                Op::Relu { input } => {
                    let x = self.value_unchecked(input);
                    accumulate(&mut grads, input, Some(kernels::relu_backward(&g, x.data())));
                }
                Op::Linear { input, weight, bias } => {
                    let (x, w) = (self.value_unchecked(input), self.value_unchecked(weight));
                    let n = x.shape()[0];
                    let (d, out) = (x.len() / n, w.shape()[0]);
                    let need = [self.needs_grad[input.0], self.needs_grad[weight.0], self.needs_grad[bias.0]];
                    let lg = kernels::linear_backward(&g, x.data(), w.data(), n, d, out, need);
                    accumulate(&mut grads, input, lg.input);
                    accumulate(&mut grads, weight, lg.weight);
                    accumulate(&mut grads, bias, lg.bias);
                }
                Op::Softmax { input } => {
                    let y = self.values[idx].as_ref().expect("softmax value");
                    accumulate(&mut grads, input, Some(kernels::softmax_backward(&g, y.data(), y.shape()[1])));
                }
                Op::SoftmaxCrossEntropy { logits, target, reduction } => {
                    let Cache::Probs(probs) = &self.cache[idx] else { unreachable!("probs cache") };
                    let t = self.value_unchecked(target);
                    let z = self.value_unchecked(logits);
                    let k = z.shape()[1];
                    let mut scale = g[0];
                    if reduction == Reduction::Mean {
                        scale = scale / T::from_f64(z.shape()[0] as f64);
                    }
                    if self.needs_grad[logits.0] {
                        let mut dz = Vec::with_capacity(probs.len());
                        for (p, tr) in probs.chunks_exact(k).zip(t.data().chunks_exact(k)) {
                            let mass: T = tr.iter().copied().sum();
                            dz.extend(p.iter().zip(tr).map(|(&pi, &ti)| (pi * mass - ti) * scale));
                        }
                        accumulate(&mut grads, logits, Some(dz));
                    }
                    if self.needs_grad[target.0] {
                        let mut dt = Vec::with_capacity(probs.len());
                        for p in probs.chunks_exact(k) {
                            dt.extend(p.iter().map(|&pi| -pi.ln() * scale));
                        }
                        accumulate(&mut grads, target, Some(dt));
                    }
                }
                Op::Mul { lhs, rhs } => {
                    let (a, b) = (self.value_unchecked(lhs), self.value_unchecked(rhs));
                    if self.needs_grad[lhs.0] {
                        let da = g.iter().zip(b.data()).map(|(&gi, &bi)| gi * bi).collect();
                        accumulate(&mut grads, lhs, Some(da));
                    }
                    if self.needs_grad[rhs.0] {
                        let db = g.iter().zip(a.data()).map(|(&gi, &ai)| gi * ai).collect();
                        accumulate(&mut grads, rhs, Some(db));
                    }
                }
                Op::Sum { input } => {
                    let len = self.value_unchecked(input).len();
                    accumulate(&mut grads, input, Some(vec![g[0]; len]));
                }
            }
        }

        let mut out = Gradients { params: vec![None; self.params.len()], inputs: BTreeMap::new() };
        for id in self.graph.node_ids().take(node.0 + 1) {
            match self.graph.op(id) {
                Op::Param { index } if self.needs_grad[id.0] => {
                    let shape = self.params[*index].shape().to_vec();
                    let data = grads[id.0].take().unwrap_or_else(|| vec![T::zero(); shape.iter().product()]);
                    let t = Tensor::new(shape, data)?;
                    match &mut out.params[*index] {
                        // Same parameter referenced by several nodes.
                        Some(existing) => {
                            for (e, v) in existing.data_mut().iter_mut().zip(t.data()) {
                                *e = *e + *v;
                            }
                        }
                        slot @ None => *slot = Some(t),
                    }
                }
                Op::Input { name } if self.needs_grad[id.0] => {
                    let shape = self.inputs[name].shape().to_vec();
                    let data = grads[id.0].take().unwrap_or_else(|| vec![T::zero(); shape.iter().product()]);
                    match out.inputs.get_mut(name) {
                        Some(existing) => {
                            for (e, v) in existing.data_mut().iter_mut().zip(&data) {
                                *e = *e + *v;
                            }
                        }
                        None => {
                            out.inputs.insert(name.clone(), Tensor::new(shape, data)?);
                        }
                    }
                }
                _ => {}
            }
        }
        Ok(out)
    }
}

impl<T: Scalar> Session<'_, T> {
    /// Hash of every relu on/off state and max-pool winner of the last
    /// forward pass. Two points with equal signatures lie on the same linear
    /// piece of the piecewise-smooth operators.
    pub fn kink_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for id in self.graph.node_ids().take(self.values.len()) {
            match (self.graph.op(id), &self.cache[id.0]) {
                (Op::Relu { input }, _) => {
                    for v in self.value_unchecked(*input).data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                (Op::MaxPool2 { .. }, Cache::Argmax(arg)) => arg.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], id: NodeId, g: Option<Vec<T>>) {
    let Some(g) = g else { return };
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(&g) {
                *e = *e + *v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
