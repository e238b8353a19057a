//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied to its variables in
//! topological (execution) order. [`Graph::backward`] walks the record in
//! reverse and applies each operation's adjoint rule, accumulating
//! gradients for every node that requires them. Recorded values are never
//! mutated after insertion, so a record may be replayed any number of times
//! and produces bit-identical gradients.
//!
//! ```
//! use crossrecon::autodiff::Graph;
//! use crossrecon::tensor::Tensor;
//!
//! let g = Graph::<f64>::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.square(x);
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).item(), 6.0);
//! ```

mod gradcheck;
mod ops;

use std::cell::{Cell, RefCell};
use std::rc::Rc;

pub use gradcheck::{gradcheck, GradcheckReport, DEFAULT_STEP};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
    pub out_channels: usize,
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Square(Var),
    Sqrt(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Softplus(Var),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    MaxAxis {
        x: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Upsample2x(Var),
    LayerNorm {
        x: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::MatMul { .. } => "matmul",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Sum(..) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::MaxAxis { .. } => "max_axis",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Gather { .. } => "gather",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample2x(..) => "upsample2x",
            Op::LayerNorm { .. } => "layer_norm",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Gather { table, .. } => vec![*table],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Relu(x)
            | Op::Square(x)
            | Op::Sqrt(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sigmoid(x)
            | Op::Softplus(x)
            | Op::Sum(x)
            | Op::Reshape(x)
            | Op::Upsample2x(x) => vec![*x],
            Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::SumAxis { x, .. }
            | Op::MaxAxis { x, .. }
            | Op::Permute { x, .. }
            | Op::Narrow { x, .. }
            | Op::LayerNorm { x, .. } => vec![*x],
        }
    }
}

pub(crate) struct Node<T> {
    pub op: Op<T>,
    pub value: Rc<Tensor<T>>,
    pub requires_grad: bool,
}

/// One entry of a computation record: which operation produced which node
/// from which inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordEntry {
    pub op: &'static str,
    pub inputs: Vec<usize>,
    pub output: usize,
}

/// Computation record plus the values of every node.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    macs: Cell<u64>,
    /// values produced by `detach`, in call order
    detached: RefCell<Vec<Rc<Tensor<T>>>>,
    /// when set, `detach` returns these values instead of its input's
    replay: Option<Vec<Rc<Tensor<T>>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            macs: Cell::new(0),
            detached: RefCell::new(Vec::new()),
            replay: None,
        }
    }

    /// Graph whose `detach` calls return `values` in order, so that
    /// stop-gradient inputs stay fixed while other inputs are perturbed.
    pub fn replaying(values: Vec<Rc<Tensor<T>>>) -> Self {
        Self {
            replay: Some(values),
            ..Self::new()
        }
    }

    /// Values returned by `detach` so far.
    pub fn detached_values(&self) -> Vec<Rc<Tensor<T>>> {
        self.detached.borrow().clone()
    }

    /// Leaf that accumulates a gradient.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf without gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&self, x: Var) -> Var {
        let mut v = self.value(x);
        let k = self.detached.borrow().len();
        if let Some(r) = self.replay.as_ref().and_then(|r| r.get(k)) {
            assert_eq!(r.shape(), v.shape(), "replayed detach value has the wrong shape");
            v = Rc::clone(r);
        }
        self.detached.borrow_mut().push(Rc::clone(&v));
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: Op::Leaf,
            value: v,
            requires_grad: false,
        });
        Var(nodes.len() - 1)
    }

    fn push_leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: Op::Leaf,
            value: Rc::new(value),
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub(crate) fn push(&self, op: Op<T>, value: Tensor<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.inputs().iter().any(|v| nodes[v.0].requires_grad);
        nodes.push(Node {
            op,
            value: Rc::new(value),
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, x: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[x.0].value)
    }

    pub fn shape(&self, x: Var) -> Vec<usize> {
        self.nodes.borrow()[x.0].value.shape().to_vec()
    }

    /// Value of a single-element node.
    pub fn item(&self, x: Var) -> T {
        self.nodes.borrow()[x.0].value.data()[0]
    }

    pub fn requires_grad(&self, x: Var) -> bool {
        self.nodes.borrow()[x.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Multiply-adds performed by matmul and convolution nodes so far.
    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    pub(crate) fn add_macs(&self, n: u64) {
        self.macs.set(self.macs.get() + n);
    }

    /// Topologically ordered listing of the recorded operations.
    pub fn record(&self) -> Vec<RecordEntry> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .map(|(i, n)| RecordEntry {
                op: n.op.name(),
                inputs: n.op.inputs().iter().map(|v| v.0).collect(),
                output: i,
            })
            .collect()
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !nodes[id].requires_grad {
                grads[id] = None;
                continue;
            }
            if matches!(nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            ops::backward_node(&nodes, id, &g, &mut grads);
        }
        let shapes = nodes[..=loss.0]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        let leaf = nodes[..=loss.0]
            .iter()
            .map(|n| n.requires_grad && matches!(n.op, Op::Leaf))
            .collect();
        Ok(Gradients {
            grads,
            shapes,
            leaf,
        })
    }
}

/// Gradients of a scalar with respect to the graph's trainable leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    leaf: Vec<bool>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a trainable leaf, or `None` for nodes that do not
    /// require gradients.
    pub fn get(&self, x: Var) -> Option<Tensor<T>> {
        if !self.leaf.get(x.0).copied().unwrap_or(false) {
            return None;
        }
        let shape = &self.shapes[x.0];
        Some(match &self.grads[x.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        })
    }

    /// Gradient of a trainable leaf; panics if `x` is not one.
    pub fn wrt(&self, x: Var) -> Tensor<T> {
        self.get(x)
            .unwrap_or_else(|| panic!("node {} is not a trainable leaf", x.0))
    }
}

#[cfg(test)]
mod tests;
