//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s. The graph is
//! rebuilt for each batch and discarded afterwards; [`Tape::backward`] walks it
//! once in reverse creation order.

mod kernels;
mod ops;

use std::cell::{Cell, Ref, RefCell};

use crate::error::{Error, Result};
use crate::{Scalar, Tensor};

/// Cosine and normalization denominators are clamped at this value.
pub const NORM_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, T),
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Gather(usize, Vec<usize>),
    Softmax(usize),
    MaskedSoftmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(usize),
    Tanh(usize),
    Square(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    MaskedMean {
        x: usize,
        mask: Vec<T>,
    },
    NormalizeRows {
        x: usize,
        norms: Vec<T>,
    },
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "batch_matmul",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::Gather(..) => "gather",
            Op::Softmax(..) => "softmax",
            Op::MaskedSoftmax(..) => "masked_softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Tanh(..) => "tanh",
            Op::Square(..) => "square",
            Op::Log(..) => "log",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumLast(..) => "sum_last",
            Op::MaskedMean { .. } => "masked_mean",
            Op::NormalizeRows { .. } => "normalize_rows",
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) needs_grad: bool,
}

/// Recording of one forward computation.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    first_non_finite: RefCell<Option<&'static str>>,
    clamped_norms: Cell<usize>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            first_non_finite: RefCell::new(None),
            clamped_norms: Cell::new(0),
        }
    }

    /// Leaf that receives a gradient.
    pub fn var(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, mut value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        value.clear_grad();
        value.set_requires_grad(requires_grad);
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of normalizations whose denominator hit [`NORM_CLAMP`].
    pub fn clamped_norms(&self) -> usize {
        self.clamped_norms.get()
    }

    /// Primitive that first produced a non-finite value, if any.
    pub fn non_finite_primitive(&self) -> Option<&'static str> {
        *self.first_non_finite.borrow()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        if !value.all_finite() {
            let mut first = self.first_non_finite.borrow_mut();
            if first.is_none() {
                *first = Some(op.name());
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn node_value(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Back-propagates from a scalar `loss`.
    ///
    /// Fails with a contract violation when `loss` is not a scalar, and with a
    /// numeric failure when any forward value or gradient is non-finite.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        assert!(std::ptr::eq(loss.tape, self), "loss belongs to another tape");
        if let Some(primitive) = self.non_finite_primitive() {
            return Err(Error::NumericFailure {
                primitive: primitive.to_string(),
            });
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NumericFailure {
                    primitive: format!("{} (backward)", node.op.name()),
                });
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            ops::backprop(&nodes, id, &g, &mut grads);
        }
        let leaves = nodes
            .iter()
            .enumerate()
            .map(|(id, n)| {
                if matches!(n.op, Op::Leaf) && n.needs_grad {
                    grads.get_mut(id).and_then(Option::take)
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { leaves })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf; `None` when the loss does not depend on it.
    pub fn get(&self, var: Var<'_, T>) -> Option<&[T]> {
        self.leaves.get(var.id).and_then(|g| g.as_deref())
    }

    /// Gradient of a leaf, zero-filled when unreachable.
    pub fn wrt(&self, var: Var<'_, T>) -> Tensor<T> {
        let value = var.value();
        match self.get(var) {
            Some(g) => Tensor::from_parts(value.shape().to_vec(), g.to_vec()),
            None => Tensor::zeros(value.shape()),
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        self.tape.node_value(self.id)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        let v = self.value();
        Tensor::from_parts(v.shape().to_vec(), v.data().to_vec())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    pub(crate) fn needs_grad(&self) -> bool {
        self.tape.needs_grad(self.id)
    }
}
