//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and enough saved state to propagate gradients. Tensors are row-major and
//! carry an explicit shape. Most layers in this crate treat a feature map as
//! a `[tokens, channels]` matrix, so the op set is deliberately small:
//! elementwise arithmetic, a few broadcasts, matrix products, softmax,
//! layer norm and index gathers (which cover windowing, shifting, patch
//! merging, im2col and bilinear resampling).

mod gemm;
mod ops;

use std::collections::HashMap;
use std::sync::Arc;

use crate::params::{ParamId, ParamStore};

pub(crate) use gemm::gemm;

/// Marks a zero entry in a gather index.
pub const PAD: u32 = u32::MAX;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Compressed sparse rows describing `out[i] = Σ w * x[col]`.
#[derive(Clone, Debug, Default)]
pub struct SparseMap {
    pub offsets: Vec<u32>,
    pub cols: Vec<u32>,
    pub weights: Vec<f64>,
}

impl SparseMap {
    pub fn rows(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddSuffix(Var, Var),
    MulSuffix(Var, Var),
    MulRows(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Clamp(Var, f64, f64),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    SumLast(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather(Var, Arc<Vec<u32>>),
    Sparse(Var, Arc<SparseMap>),
    Concat(Vec<Var>),
    Reshape(Var),
    MaxLast(Var, Vec<u32>),
}

pub(crate) struct Node {
    pub(crate) value: Arc<Vec<f64>>,
    pub(crate) shape: Vec<usize>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Predicate over parameter names.
pub type NameFilter = Arc<dyn Fn(&str) -> bool + Send + Sync>;

/// The tape.
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    params: HashMap<ParamId, Var>,
    frozen: Option<NameFilter>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that records operations for backpropagation.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            params: HashMap::new(),
            frozen: None,
        }
    }

    /// A graph that only evaluates. Parameters and inputs never require
    /// gradients and no backward state is kept.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Parameters whose name satisfies `frozen` are inserted as constants.
    pub fn with_frozen(mut self, frozen: NameFilter) -> Self {
        self.frozen = Some(frozen);
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op) -> Var {
        self.push_arc(Arc::new(value), shape, op)
    }

    pub(crate) fn push_arc(&mut self, value: Arc<Vec<f64>>, shape: Vec<usize>, op: Op) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>(), "{shape:?}");
        let requires_grad = self.grad_enabled && self.op_requires_grad(&op);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn op_requires_grad(&self, op: &Op) -> bool {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => false,
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddSuffix(a, b)
            | Op::MulSuffix(a, b)
            | Op::MulRows(a, b)
            | Op::MatMul { a, b, .. } => rg(a) || rg(b),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Clamp(a, ..)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::MeanRows(a)
            | Op::SumLast(a)
            | Op::Softmax(a)
            | Op::Gather(a, _)
            | Op::Sparse(a, _)
            | Op::Reshape(a)
            | Op::MaxLast(a, _) => rg(a),
            Op::LayerNorm { x, gamma, beta, .. } => rg(x) || rg(gamma) || rg(beta),
            Op::Concat(parts) => parts.iter().any(rg),
        }
    }

    /// A tensor that never receives gradients.
    pub fn constant(&mut self, value: Vec<f64>, shape: &[usize]) -> Var {
        assert_eq!(value.len(), shape.iter().product::<usize>(), "constant shape");
        self.nodes.push(Node {
            value: Arc::new(value),
            shape: shape.to_vec(),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients (when the graph records them).
    pub fn input(&mut self, value: Vec<f64>, shape: &[usize]) -> Var {
        assert_eq!(value.len(), shape.iter().product::<usize>(), "input shape");
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node {
            value: Arc::new(value),
            shape: shape.to_vec(),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(vec![value], &[1])
    }

    /// Inserts a parameter leaf, sharing its storage. Repeated calls return
    /// the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let frozen = self.frozen.as_ref().is_some_and(|f| f(&p.name));
        let requires_grad = self.grad_enabled && !frozen;
        self.nodes.push(Node {
            value: p.value.clone(),
            shape: p.shape.clone(),
            op: Op::Leaf,
            requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// The single value of a one-element tensor.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar() on tensor of shape {:?}", self.shape(v));
        val[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward() needs a scalar loss");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient with respect to a node, if any flowed to it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to a parameter inserted with [`Graph::param`].
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).and_then(|v| self.wrt(*v))
    }

    /// All parameter gradients, ordered by parameter id.
    pub fn params(&self) -> Vec<(ParamId, &[f64])> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(id, v)| self.wrt(*v).map(|g| (*id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

pub(crate) fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}
