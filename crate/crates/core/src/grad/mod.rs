//! Define-by-run reverse-mode differentiation over `f64` arrays.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Calling
//! [`Graph::backward`] on a scalar node walks the record in reverse and
//! populates gradients for every node that depends on a `requires_grad` leaf.
//! Graphs are cheap to build, so callers create a fresh one per forward pass.
//!
//! ```
//! use hat_core::grad::Graph;
//! use ndarray::arr1;
//!
//! let g = Graph::new();
//! let x = g.leaf(arr1(&[1.0, -2.0]).into_dyn());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().as_slice().unwrap(), &[2.0, -4.0]);
//! ```

mod backward;
mod check;
mod ops;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use ndarray::{Array1, ArrayD};

pub use check::{finite_diff_check, finite_diff_report, FdReport};

use crate::error::{Error, Result};

/// Dense row-major array used for every value and gradient.
pub type Tensor = ArrayD<f64>;

/// Batch-norm variance floor.
pub const BN_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operation with a caller-supplied adjoint.
///
/// `backward` receives the input, the forward output and the output gradient
/// and returns the input gradient.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn forward(&self, input: &Tensor) -> Tensor;
    fn backward(&self, input: &Tensor, output: &Tensor, grad_output: &Tensor) -> Tensor;
}

/// Statistics used to normalize one batch-norm call in training mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Array1<f64>,
    /// Biased (population) variance over the normalized elements.
    pub var: Array1<f64>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

/// How a batch-norm node normalizes its input.
#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with fixed running statistics.
    Running {
        mean: &'a Array1<f64>,
        var: &'a Array1<f64>,
    },
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MatMul(Var, Var),
    Conv1d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        padding: usize,
    },
    MaxPool1d {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Tensor,
        inv_std: Array1<f64>,
        stats: Option<BatchStats>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Clamp {
        input: Var,
        lo: f64,
        hi: f64,
    },
    L2Norm(Var),
    Cosine {
        a: Var,
        b: Var,
        a_unit: Tensor,
        b_unit: Tensor,
        a_norm: Array1<f64>,
        b_norm: Array1<f64>,
    },
    Frames {
        input: Var,
        window: usize,
        hop: usize,
    },
    Reshape(Var),
    Permute {
        input: Var,
        axes: Vec<usize>,
    },
    Pick {
        input: Var,
        index: Vec<usize>,
    },
    MaxExcept {
        input: Var,
        argmax: Vec<usize>,
    },
    Custom {
        input: Var,
        op: Rc<dyn CustomOp>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::MatMul(..) => "matmul",
            Op::Conv1d { .. } => "conv1d",
            Op::MaxPool1d { .. } => "max_pool1d",
            Op::Relu(..) => "relu",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Linear { .. } => "linear",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::Clamp { .. } => "clamp",
            Op::L2Norm(..) => "l2_norm",
            Op::Cosine { .. } => "cosine_similarity",
            Op::Frames { .. } => "frames",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Pick { .. } => "pick",
            Op::MaxExcept { .. } => "max_except",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Rc<Tensor>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Recording of one forward computation.
///
/// Single-threaded by construction; build one graph per thread.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.nodes.borrow();
        let mut list = f.debug_list();
        for n in nodes.iter() {
            list.entry(&(n.op.name(), n.value.shape()));
        }
        list.finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Differentiable input (`requires_grad = true`).
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push_leaf(Rc::new(value), true)
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_leaf(Rc::new(value), false)
    }

    /// Non-differentiable input sharing storage with the caller.
    pub fn constant_shared(&self, value: Rc<Tensor>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&self, value: Rc<Tensor>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|v| nodes[v.0].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let value = self.value(v);
        if value.len() != 1 {
            return Err(Error::NotScalar(value.shape().to_vec()));
        }
        Ok(*value.iter().next().unwrap())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Gradient populated by the last [`Graph::backward`] call, if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads.borrow().get(v.0).and_then(|g| g.clone())
    }

    /// Batch statistics recorded by a training-mode batch-norm node.
    pub fn batch_stats(&self, v: Var) -> Option<BatchStats> {
        match &self.nodes.borrow()[v.0].op {
            Op::BatchNorm { stats, .. } => stats.clone(),
            _ => None,
        }
    }
}
