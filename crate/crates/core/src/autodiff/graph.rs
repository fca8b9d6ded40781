use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::AutodiffError;
use super::Tensor;

/// Index of a node inside its [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds. Shapes are resolved when the graph is evaluated.
#[derive(Debug, Clone)]
pub enum Op {
    /// Named leaf supplied through [`Bindings`]; `trainable` leaves receive gradients.
    Input { name: String, trainable: bool },
    Constant(Tensor),
    /// `[.., k] · [k, m] → [.., m]`.
    MatMul(NodeId, NodeId),
    /// `[B, n, k] · [B, k, m]`, or against `[B, m, k]` transposed.
    BatchMatMul {
        a: NodeId,
        b: NodeId,
        transpose_b: bool,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Silu(NodeId),
    /// Per-row normalisation over the last axis, no affine terms.
    LayerNorm(NodeId),
    /// Per-row softmax over the last axis.
    Softmax(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    SumSquares(NodeId),
    /// `sqrt(Σ v² + ε²)` over the last axis; keeps a trailing extent of 1.
    RowNorm(NodeId, f64),
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice {
        input: NodeId,
        axis: usize,
        start: usize,
        end: usize,
    },
    /// Broadcast `input` to the shape of `like` (trailing-axis alignment).
    Broadcast { input: NodeId, like: NodeId },
    Reshape { input: NodeId, shape: Vec<usize> },
    Permute { input: NodeId, perm: Vec<usize> },
    StopGradient(NodeId),
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul { .. } => "batch-matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "subtract",
            Op::Mul(..) => "multiply",
            Op::Scale(..) => "scale",
            Op::Silu(_) => "silu",
            Op::LayerNorm(_) => "layer-norm",
            Op::Softmax(_) => "softmax",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::SumSquares(_) => "sum-of-squares",
            Op::RowNorm(..) => "row-norm",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Broadcast { .. } => "broadcast",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::StopGradient(_) => "stop-gradient",
        }
    }

    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input { .. } | Op::Constant(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::BatchMatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Silu(a)
            | Op::LayerNorm(a)
            | Op::Softmax(a)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::SumSquares(a)
            | Op::RowNorm(a, _)
            | Op::StopGradient(a) => vec![*a],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Slice { input, .. } | Op::Reshape { input, .. } | Op::Permute { input, .. } => {
                vec![*input]
            }
            Op::Broadcast { input, like } => vec![*input, *like],
        }
    }
}

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Append-only computation graph; node inputs always precede the node.
#[derive(Debug, Clone)]
pub struct Graph {
    id: u64,
    nodes: Vec<Op>,
    leaves: HashMap<String, NodeId>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            leaves: HashMap::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[Op] {
        &self.nodes
    }

    pub fn leaf(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    /// Names of all leaves, in declaration order.
    pub fn leaf_names(&self) -> Vec<(String, bool)> {
        self.nodes
            .iter()
            .filter_map(|op| match op {
                Op::Input { name, trainable } => Some((name.clone(), *trainable)),
                _ => None,
            })
            .collect()
    }

    fn push(&mut self, op: Op) -> NodeId {
        for i in op.inputs() {
            assert!(i.0 < self.nodes.len(), "node input must already exist");
        }
        self.nodes.push(op);
        NodeId(self.nodes.len() - 1)
    }

    fn declare(&mut self, name: &str, trainable: bool) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            if let Op::Input { trainable: t, .. } = &mut self.nodes[id.0] {
                *t |= trainable;
            }
            return id;
        }
        let id = self.push(Op::Input {
            name: name.to_string(),
            trainable,
        });
        self.leaves.insert(name.to_string(), id);
        id
    }

    /// A non-trainable named input. Re-declaring a name returns the same node.
    pub fn input(&mut self, name: &str) -> NodeId {
        self.declare(name, false)
    }

    /// A trainable named leaf.
    pub fn param(&mut self, name: &str) -> NodeId {
        self.declare(name, true)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Constant(t))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> NodeId {
        self.push(Op::BatchMatMul { a, b, transpose_b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a, c))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Silu(a))
    }

    pub fn layer_norm(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LayerNorm(a))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumSquares(a))
    }

    /// Smoothed Euclidean norm of each row with the default ε.
    pub fn row_norm(&mut self, a: NodeId) -> NodeId {
        self.push(Op::RowNorm(a, super::NORM_EPS))
    }

    pub fn row_norm_eps(&mut self, a: NodeId, eps: f64) -> NodeId {
        self.push(Op::RowNorm(a, eps))
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> NodeId {
        self.push(Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        })
    }

    pub fn slice(&mut self, input: NodeId, axis: usize, start: usize, end: usize) -> NodeId {
        self.push(Op::Slice {
            input,
            axis,
            start,
            end,
        })
    }

    pub fn broadcast(&mut self, input: NodeId, like: NodeId) -> NodeId {
        self.push(Op::Broadcast { input, like })
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::Reshape {
            input,
            shape: shape.to_vec(),
        })
    }

    pub fn permute(&mut self, input: NodeId, perm: &[usize]) -> NodeId {
        self.push(Op::Permute {
            input,
            perm: perm.to_vec(),
        })
    }

    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        self.push(Op::StopGradient(a))
    }

    /// Transpose of the last two axes.
    pub fn transpose(&mut self, a: NodeId, ndim: usize) -> NodeId {
        let mut perm: Vec<usize> = (0..ndim).collect();
        perm.swap(ndim - 2, ndim - 1);
        self.permute(a, &perm)
    }

    /// `a + broadcast(b)`; the usual bias add.
    pub fn add_broadcast(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let bb = self.broadcast(b, a);
        self.add(a, bb)
    }

    /// `a ⊙ broadcast(b)`.
    pub fn mul_broadcast(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let bb = self.broadcast(b, a);
        self.mul(a, bb)
    }

    /// Marks which nodes depend on a trainable leaf through differentiable edges.
    pub(crate) fn needs_grad(&self) -> Vec<bool> {
        let mut need = vec![false; self.nodes.len()];
        for (i, op) in self.nodes.iter().enumerate() {
            need[i] = match op {
                Op::Input { trainable, .. } => *trainable,
                Op::Constant(_) | Op::StopGradient(_) => false,
                // `like` only supplies a shape.
                Op::Broadcast { input, .. } => need[input.0],
                other => other.inputs().iter().any(|j| need[j.0]),
            };
        }
        need
    }

    /// Nodes the value of `output` depends on (including itself).
    pub(crate) fn ancestors(&self, output: NodeId) -> Vec<bool> {
        let mut mark = vec![false; self.nodes.len()];
        mark[output.0] = true;
        for i in (0..=output.0).rev() {
            if !mark[i] {
                continue;
            }
            match &self.nodes[i] {
                Op::Broadcast { input, .. } => mark[input.0] = true,
                op => {
                    for j in op.inputs() {
                        mark[j.0] = true;
                    }
                }
            }
        }
        mark
    }
}

/// Source of leaf values for evaluation.
pub trait Bindings {
    fn lookup(&self, name: &str) -> Option<&Tensor>;
}

impl<S: std::hash::BuildHasher> Bindings for HashMap<String, Tensor, S> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

impl Bindings for indexmap::IndexMap<String, Tensor> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

impl<T: Bindings + ?Sized> Bindings for &T {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        (**self).lookup(name)
    }
}

/// Looks names up in each source in turn.
pub struct Chain<'a>(pub Vec<&'a dyn Bindings>);

impl Bindings for Chain<'_> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.0.iter().find_map(|b| b.lookup(name))
    }
}

/// Cached forward values for one evaluation of a graph.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub(crate) graph_id: u64,
    pub(crate) values: Vec<Tensor>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn take(mut self, id: NodeId) -> Tensor {
        std::mem::replace(&mut self.values[id.0], Tensor::scalar(0.0))
    }

    pub fn graph_id(&self) -> u64 {
        self.graph_id
    }
}

/// Gradients keyed by trainable leaf name.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub(crate) map: indexmap::IndexMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn into_map(self) -> indexmap::IndexMap<String, Tensor> {
        self.map
    }

    pub(crate) fn from_map(map: indexmap::IndexMap<String, Tensor>) -> Self {
        Self { map }
    }
}

pub(crate) fn shape_err(graph: &Graph, id: NodeId, detail: String) -> AutodiffError {
    let op = graph.op(id);
    let label = match op {
        Op::Input { name, .. } => format!("{} '{}'", op.kind(), name),
        _ => op.kind().to_string(),
    };
    AutodiffError::ShapeMismatch {
        node: id.0,
        op: label,
        detail,
    }
}
