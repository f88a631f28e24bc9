use serde::{Deserialize, Serialize};

/// Index of a node inside its [`Graph`]. Ids are handed out in insertion
/// order, so every operand id is smaller than the id of its consumer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a loss is reduced over the batch dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Tensor bound by name at forward time.
    Input {
        name: String,
    },
    /// Parameter `index` of the parameter slice handed to the session.
    Param {
        index: usize,
    },
    /// NHWC convolution with an `[out, k, k, in]` kernel and zero padding.
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    /// 2x2 max pooling with stride 2; trailing odd rows/columns are dropped.
    MaxPool2 {
        input: NodeId,
    },
    Relu {
        input: NodeId,
    },
    /// Fully-connected layer over everything but the leading batch axis.
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    /// Softmax over the last axis of an `[n, k]` tensor.
    Softmax {
        input: NodeId,
    },
    /// Fused softmax + cross-entropy against an `[n, k]` target distribution.
    SoftmaxCrossEntropy {
        logits: NodeId,
        target: NodeId,
        reduction: Reduction,
    },
    /// Element-wise product of two same-shape tensors.
    Mul {
        lhs: NodeId,
        rhs: NodeId,
    },
    /// Sum of every element, producing a `[1]` tensor.
    Sum {
        input: NodeId,
    },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "maxpool2d",
            Op::Relu { .. } => "relu",
            Op::Linear { .. } => "linear",
            Op::Softmax { .. } => "softmax",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Mul { .. } => "mul",
            Op::Sum { .. } => "sum",
        }
    }

    pub fn operands(&self) -> Vec<NodeId> {
        match *self {
            Op::Input { .. } | Op::Param { .. } => vec![],
            Op::Conv2d { input, kernel, bias, .. } => vec![input, kernel, bias],
            Op::MaxPool2 { input } | Op::Relu { input } | Op::Softmax { input } | Op::Sum { input } => {
                vec![input]
            }
            Op::Linear { input, weight, bias } => vec![input, weight, bias],
            Op::SoftmaxCrossEntropy { logits, target, .. } => vec![logits, target],
            Op::Mul { lhs, rhs } => vec![lhs, rhs],
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub op: Op,
    pub label: String,
}

/// Static computation graph. Nodes are stored in topological order.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    pub(crate) outputs: Vec<(String, NodeId)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn label(&self, id: NodeId) -> &str {
        &self.nodes[id.0].label
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    fn push(&mut self, op: Op) -> NodeId {
        for operand in op.operands() {
            assert!(operand.0 < self.nodes.len(), "operand {operand:?} does not exist yet");
        }
        let id = NodeId(self.nodes.len());
        let label = match &op {
            Op::Input { name } => format!("input:{name}"),
            Op::Param { index } => format!("param:{index}"),
            other => format!("{}#{}", other.kind(), id.0),
        };
        self.nodes.push(Node { op, label });
        id
    }

    /// Attach a human-readable label used in error messages.
    pub fn set_label(&mut self, id: NodeId, label: impl Into<String>) {
        self.nodes[id.0].label = label.into();
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(Op::Input { name: name.to_string() })
    }

    pub fn param(&mut self, index: usize) -> NodeId {
        self.push(Op::Param { index })
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId, stride: usize, padding: usize) -> NodeId {
        assert!(stride > 0, "stride must be positive");
        self.push(Op::Conv2d { input, kernel, bias, stride, padding })
    }

    pub fn max_pool2(&mut self, input: NodeId) -> NodeId {
        self.push(Op::MaxPool2 { input })
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        self.push(Op::Relu { input })
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::Linear { input, weight, bias })
    }

    pub fn softmax(&mut self, input: NodeId) -> NodeId {
        self.push(Op::Softmax { input })
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: NodeId, reduction: Reduction) -> NodeId {
        self.push(Op::SoftmaxCrossEntropy { logits, target, reduction })
    }

    pub fn mul(&mut self, lhs: NodeId, rhs: NodeId) -> NodeId {
        self.push(Op::Mul { lhs, rhs })
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        self.push(Op::Sum { input })
    }

    /// Register `id` as a named graph output.
    pub fn output(&mut self, name: &str, id: NodeId) {
        self.outputs.retain(|(n, _)| n != name);
        self.outputs.push((name.to_string(), id));
    }

    pub fn output_id(&self, name: &str) -> Option<NodeId> {
        self.outputs.iter().find(|(n, _)| n == name).map(|&(_, id)| id)
    }

    pub fn outputs(&self) -> &[(String, NodeId)] {
        &self.outputs
    }

    pub fn input_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Input { name } => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }
}
