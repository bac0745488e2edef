//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Operations evaluate eagerly and record themselves into an implicit
//! computation graph (a DAG of reference-counted nodes). [`grad`] runs the
//! reverse pass; with `create_graph` the backward pass itself records nodes,
//! so gradients of gradients work with the same mechanism.

mod grad;
mod ops;

pub use grad::{finite_difference_gradient, grad};
pub use ops::{concat, cosine_similarity, cross_entropy, dot, mse};

use std::cell::Cell;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

/// Errors surfaced by tensor operations and the reverse pass.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a scalar, got shape {shape:?}")]
    NonScalar { op: &'static str, shape: Vec<usize> },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
}

pub type TensorResult<T> = Result<T, TensorError>;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Whether newly created operations record backward closures.
pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Runs `f` with gradient recording disabled; every tensor produced inside
/// comes out detached from the graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    let out = f();
    GRAD_ENABLED.with(|c| c.set(prev));
    out
}

/// Backward closure: maps the output gradient and the node's parents to one
/// gradient per parent. Built from public ops so a second reverse pass can
/// differentiate through it.
pub(crate) type Vjp = Box<dyn Fn(&Tensor, &[Tensor]) -> TensorResult<Vec<Tensor>>>;

pub(crate) struct Node {
    id: u64,
    op: &'static str,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    vjp: Option<Vjp>,
}

/// Handle to one value in the computation graph. Cloning is cheap (one `Rc`
/// bump); the underlying buffer is immutable, so updates replace tensors
/// rather than mutating them.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Node>,
}

impl Tensor {
    fn new_node(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        vjp: Option<Vjp>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Node {
                id: next_id(),
                op,
                shape,
                data,
                requires_grad,
                parents,
                vjp,
            }),
        }
    }

    /// Constant tensor (never receives a gradient).
    pub fn constant(data: Vec<f64>, shape: &[usize]) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "constant: shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor::new_node("constant", shape.to_vec(), data, false, Vec::new(), None)
    }

    /// Leaf tensor that accumulates gradients in the reverse pass.
    pub fn leaf(data: Vec<f64>, shape: &[usize]) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "leaf: shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor::new_node("leaf", shape.to_vec(), data, true, Vec::new(), None)
    }

    /// Rank-0 constant.
    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(vec![v], &[])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::constant(vec![0.0; shape.iter().product()], shape)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::constant(vec![1.0; shape.iter().product()], shape)
    }

    /// Registers an op node. Parents and the backward closure are kept only
    /// when some parent participates in the graph and recording is enabled.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        vjp: Vjp,
    ) -> TensorResult<Tensor> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        let requires_grad = is_grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            Ok(Tensor::new_node(op, shape, data, true, parents, Some(vjp)))
        } else {
            Ok(Tensor::new_node(op, shape, data, false, Vec::new(), None))
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn op_name(&self) -> &'static str {
        self.inner.op
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn parents(&self) -> &[Tensor] {
        &self.inner.parents
    }

    pub(crate) fn vjp(&self) -> Option<&Vjp> {
        self.inner.vjp.as_ref()
    }

    /// Value of a single-element tensor.
    ///
    /// Panics when the tensor holds more than one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data[0]
    }

    /// Same values, detached from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.inner.data.clone(), &self.inner.shape)
    }

    /// Fresh leaf with the same values.
    pub fn to_leaf(&self) -> Tensor {
        Tensor::leaf(self.inner.data.clone(), &self.inner.shape)
    }

    pub fn zeros_like(&self) -> Tensor {
        Tensor::zeros(self.shape())
    }

    /// True when both tensors hold bitwise-identical shapes and values.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<f64> = self.data().iter().take(8).copied().collect();
        write!(
            f,
            "Tensor{{op: {}, shape: {:?}, data: {:?}{}}}",
            self.op_name(),
            self.shape(),
            head,
            if self.len() > 8 { ", .." } else { "" }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_do_not_require_grad() {
        let c = Tensor::constant(vec![1.0, 2.0], &[2]);
        assert!(!c.requires_grad());
        let l = Tensor::leaf(vec![1.0, 2.0], &[2]);
        assert!(l.requires_grad());
    }

    #[test]
    fn no_grad_detaches_results() {
        let x = Tensor::leaf(vec![2.0], &[]);
        let y = no_grad(|| x.mul(&x).unwrap());
        assert!(!y.requires_grad());
        let z = x.mul(&x).unwrap();
        assert!(z.requires_grad());
    }

    #[test]
    fn scalar_shape_is_rank_zero() {
        let s = Tensor::scalar(3.5);
        assert_eq!(s.ndim(), 0);
        assert_eq!(s.item(), 3.5);
    }
}
