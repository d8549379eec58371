use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::{self, OpKind, Saved};
use super::params::ParamStore;
use super::tensor::{NodeRef, Tensor};
use super::DiffError;
use crate::scalar::Scalar;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug)]
enum NodeKind<T> {
    Constant,
    Param,
    Op(OpKind<T>, Saved<T>),
}

#[derive(Debug)]
struct Node<T> {
    kind: NodeKind<T>,
    inputs: Vec<usize>,
    value: Tensor<T>,
}

/// Gradients keyed by parameter name.
pub type Gradients<T> = BTreeMap<String, Tensor<T>>;

/// Append-only record of a forward computation.
///
/// Nodes only reference earlier nodes, so the record is acyclic by construction.
/// A graph supports exactly one [`backward`](Graph::backward) call.
#[derive(Debug)]
pub struct Graph<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, usize>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: BTreeMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, kind: NodeKind<T>, inputs: Vec<usize>, value: Tensor<T>) -> Tensor<T> {
        let id = self.nodes.len();
        let mut out = value.detach();
        self.nodes.push(Node { kind, inputs, value: value.detach() });
        out.node = Some(NodeRef { graph: self.id, id });
        out
    }

    /// Records a constant input (no gradient flows out of the graph through it).
    pub fn constant(&mut self, value: Tensor<T>) -> Tensor<T> {
        self.push(NodeKind::Constant, vec![], value)
    }

    /// Registers a named parameter leaf. Registering the same name twice returns the same node.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Tensor<T> {
        if let Some(&id) = self.params.get(name) {
            let mut t = self.nodes[id].value.clone();
            t.node = Some(NodeRef { graph: self.id, id });
            return t;
        }
        let t = self.push(NodeKind::Param, vec![], value.detach());
        self.params.insert(name.to_string(), t.node.unwrap().id);
        t
    }

    /// Registers every parameter of `store`, so that unused ones receive zero gradients.
    pub fn bind(&mut self, store: &ParamStore<T>) -> BTreeMap<String, Tensor<T>> {
        store.iter().map(|(name, value)| (name.to_string(), self.param(name, value))).collect()
    }

    fn node_of(&mut self, t: &Tensor<T>) -> Result<usize, DiffError> {
        match t.node {
            Some(NodeRef { graph, id }) if graph == self.id => Ok(id),
            Some(_) => Err(DiffError::ForeignTensor),
            None => Ok(self.constant(t.clone()).node.unwrap().id),
        }
    }

    /// Applies `kind` to `inputs`, recording the result.
    pub fn apply(&mut self, kind: OpKind<T>, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, DiffError> {
        let ids = inputs.iter().map(|t| self.node_of(t)).collect::<Result<Vec<_>, _>>()?;
        let (value, saved) = ops::forward(&kind, inputs)?;
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFinite { op: kind.name().to_string() });
        }
        Ok(self.push(NodeKind::Op(kind, saved), ids, value))
    }

    /// Reverse pass from a single-element `loss`.
    ///
    /// Returns a gradient for every registered parameter; parameters the loss does not
    /// depend on get zeros. Fan-out contributions are summed in graph order.
    pub fn backward(&mut self, loss: &Tensor<T>) -> Result<Gradients<T>, DiffError> {
        if self.consumed {
            return Err(DiffError::GraphConsumed);
        }
        if loss.numel() != 1 {
            return Err(DiffError::NonScalarLoss(loss.shape().to_vec()));
        }
        let root = match loss.node {
            Some(NodeRef { graph, id }) if graph == self.id => id,
            _ => return Err(DiffError::ForeignTensor),
        };
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root + 1];
        grads[root] = Some(vec![T::one()]);
        for id in (0..=root).rev() {
            let Some(gout) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let NodeKind::Op(kind, saved) = &node.kind {
                let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
                let gin = ops::backward(kind, &inputs, &node.value, saved, &gout);
                for (&input, g) in node.inputs.iter().zip(gin) {
                    match &mut grads[input] {
                        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
                        slot => *slot = Some(g),
                    }
                }
            } else {
                // Leaves keep their accumulated gradient.
                grads[id] = Some(gout);
            }
        }
        let mut out = Gradients::new();
        for (name, &id) in &self.params {
            let value = &self.nodes[id].value;
            let g = match grads.get_mut(id).and_then(Option::take) {
                Some(g) => g,
                None => vec![T::zero(); value.numel()],
            };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(DiffError::NonFinite { op: format!("gradient of {}", name) });
            }
            out.insert(name.clone(), Tensor::from_parts(value.shape().to_vec(), g));
        }
        Ok(out)
    }

    // Convenience wrappers around `apply`.

    pub fn matmul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, DiffError> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn batch_matmul(&mut self, a: &Tensor<T>, b: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>, DiffError> {
        self.apply(OpKind::BatchMatMul { trans_b }, &[a, b])
    }
    pub fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, DiffError> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, DiffError> {
        self.apply(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, DiffError> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn div(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, DiffError> {
        self.apply(OpKind::Div, &[a, b])
    }
    pub fn minimum(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, DiffError> {
        self.apply(OpKind::Minimum, &[a, b])
    }
    pub fn maximum(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, DiffError> {
        self.apply(OpKind::Maximum, &[a, b])
    }
    pub fn exp(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, DiffError> {
        self.apply(OpKind::Exp, &[x])
    }
    pub fn ln(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, DiffError> {
        self.apply(OpKind::Ln, &[x])
    }
    pub fn tanh(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, DiffError> {
        self.apply(OpKind::Tanh, &[x])
    }
    pub fn sigmoid(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, DiffError> {
        self.apply(OpKind::Sigmoid, &[x])
    }
    pub fn softplus(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, DiffError> {
        self.apply(OpKind::Softplus, &[x])
    }
    pub fn square(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, DiffError> {
        self.apply(OpKind::Square, &[x])
    }
    pub fn abs(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, DiffError> {
        self.apply(OpKind::Abs, &[x])
    }
    pub fn neg(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, DiffError> {
        self.apply(OpKind::Neg, &[x])
    }
    pub fn sqrt(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, DiffError> {
        self.apply(OpKind::Sqrt, &[x])
    }
    pub fn scale(&mut self, x: &Tensor<T>, c: T) -> Result<Tensor<T>, DiffError> {
        self.apply(OpKind::Scale(c), &[x])
    }
    pub fn shift(&mut self, x: &Tensor<T>, c: T) -> Result<Tensor<T>, DiffError> {
        self.apply(OpKind::Shift(c), &[x])
    }
    pub fn clamp(&mut self, x: &Tensor<T>, lo: T, hi: T) -> Result<Tensor<T>, DiffError> {
        self.apply(OpKind::Clamp { lo, hi }, &[x])
    }
    pub fn softmax(&mut self, x: &Tensor<T>, axis: usize) -> Result<Tensor<T>, DiffError> {
        self.apply(OpKind::Softmax { axis }, &[x])
    }
    pub fn sum(&mut self, x: &Tensor<T>, axis: Option<usize>) -> Result<Tensor<T>, DiffError> {
        self.apply(OpKind::Sum { axis }, &[x])
    }
    pub fn mean(&mut self, x: &Tensor<T>, axis: Option<usize>) -> Result<Tensor<T>, DiffError> {
        self.apply(OpKind::Mean { axis }, &[x])
    }
    pub fn concat(&mut self, xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>, DiffError> {
        self.apply(OpKind::Concat { axis }, xs)
    }
    pub fn slice(&mut self, x: &Tensor<T>, axis: usize, start: usize, end: usize) -> Result<Tensor<T>, DiffError> {
        self.apply(OpKind::Slice { axis, start, end }, &[x])
    }
    pub fn transpose(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, DiffError> {
        self.apply(OpKind::Transpose, &[x])
    }
    pub fn reshape(&mut self, x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>, DiffError> {
        self.apply(OpKind::Reshape(shape.to_vec()), &[x])
    }
    pub fn gather_rows(&mut self, x: &Tensor<T>, rows: Vec<usize>) -> Result<Tensor<T>, DiffError> {
        self.apply(OpKind::GatherRows(rows), &[x])
    }
    /// Fused GRU step: see the kernel table in [`ops`](super::ops).
    pub fn gru_cell(
        &mut self,
        x: &Tensor<T>,
        h: &Tensor<T>,
        w: &Tensor<T>,
        u: &Tensor<T>,
        b: &Tensor<T>,
    ) -> Result<Tensor<T>, DiffError> {
        self.apply(OpKind::GruCell, &[x, h, w, u, b])
    }

    /// `x W + b` for `x [B,I]`, `W [I,O]`, `b [O]`.
    pub fn linear(&mut self, x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, DiffError> {
        let xw = self.matmul(x, w)?;
        self.add(&xw, b)
    }
}
