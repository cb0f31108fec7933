//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable value node in a dynamically built computation
//! graph. Operations record a backward closure that routes the output
//! gradient to the operands; [`Tensor::backward`] runs the closures in
//! reverse topological order from a scalar loss and fills the `grad`
//! accumulator of every `requires_grad` leaf reachable from it.
//!
//! Storage is a flat row-major `Arc<Vec<T>>`, so cloning a tensor (or
//! shipping leaf data to another thread's graph) never copies the payload.
//! Graphs themselves are single-threaded (`Rc`); independent graphs may run
//! on separate threads and share leaf data through the `Arc`.

mod ops;

pub use ops::concat;

use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

use rand_distr::Distribution;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::rng::RngStream;
use crate::scalar::Scalar;

/// Errors from tensor construction and operations.
#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs} and {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("data length {len} does not match shape {shape}")]
    LengthMismatch { len: usize, shape: String },
    #[error("reshape from {from} to {to} changes the element count")]
    ReshapeNumel { from: String, to: String },
    #[error("{op}: input contains NaN")]
    NanInput { op: &'static str },
    #[error("dropout rate must satisfy 0 <= rate < 1, got {rate}")]
    InvalidDropoutRate { rate: f64 },
    #[error("backward requires a scalar loss, got shape {shape}")]
    NonScalarLoss { shape: String },
    #[error("{op}: expected rank >= {min_rank}, got shape {shape}")]
    RankTooLow {
        op: &'static str,
        min_rank: usize,
        shape: String,
    },
    #[error("{op}: {msg}")]
    Unsupported { op: &'static str, msg: String },
}

pub type TensorResult<T> = Result<Tensor<T>, TensorError>;

/// Row-major tensor shape.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Self {
        Shape(dims.to_vec())
    }

    pub fn from_vec(dims: Vec<usize>) -> Self {
        Shape(dims)
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn ndim(&self) -> usize {
        self.0.len()
    }

    /// Scalars (rank 0) have one element.
    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0[axis]
    }

    /// Row-major strides, in elements.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1usize; self.0.len()];
        for i in (0..self.0.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.0[i + 1];
        }
        s
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{}", d)?;
        }
        write!(f, "]")
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

pub(crate) struct OpRecord<T: Scalar> {
    pub(crate) parents: Vec<Tensor<T>>,
    /// Accumulates the parents' gradients given this node's gradient.
    pub(crate) backward: Box<dyn Fn(&[T])>,
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) data: Arc<Vec<T>>,
    pub(crate) shape: Shape,
    pub(crate) requires_grad: bool,
    pub(crate) grad: RefCell<Option<Vec<T>>>,
    pub(crate) op: Option<OpRecord<T>>,
}

/// Handle to a node of the computation graph. Cheap to clone.
pub struct Tensor<T: Scalar> {
    pub(crate) node: Rc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    // ── Construction ────────────────────────────────────────────────

    pub fn from_vec(data: Vec<T>, dims: &[usize]) -> TensorResult<T> {
        let shape = Shape::new(dims);
        if data.len() != shape.numel() {
            return Err(TensorError::LengthMismatch {
                len: data.len(),
                shape: shape.to_string(),
            });
        }
        Ok(Self::leaf(Arc::new(data), shape, false))
    }

    pub fn from_shared(data: Arc<Vec<T>>, dims: &[usize], requires_grad: bool) -> TensorResult<T> {
        let shape = Shape::new(dims);
        if data.len() != shape.numel() {
            return Err(TensorError::LengthMismatch {
                len: data.len(),
                shape: shape.to_string(),
            });
        }
        Ok(Self::leaf(data, shape, requires_grad))
    }

    pub fn scalar(value: T) -> Self {
        Self::leaf(Arc::new(vec![value]), Shape::new(&[]), false)
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let shape = Shape::new(dims);
        let n = shape.numel();
        Self::leaf(Arc::new(vec![T::ZERO; n]), shape, false)
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        let shape = Shape::new(dims);
        let n = shape.numel();
        Self::leaf(Arc::new(vec![value; n]), shape, false)
    }

    /// Standard normal draws.
    pub fn randn(dims: &[usize], rng: &mut RngStream) -> Self
    where
        StandardNormal: Distribution<T>,
    {
        let shape = Shape::new(dims);
        let data: Vec<T> = (0..shape.numel()).map(|_| rng.standard_normal()).collect();
        Self::leaf(Arc::new(data), shape, false)
    }

    /// Uniform draws in `[lo, hi)`.
    pub fn rand_uniform(dims: &[usize], lo: T, hi: T, rng: &mut RngStream) -> Self {
        let shape = Shape::new(dims);
        let data: Vec<T> = (0..shape.numel()).map(|_| rng.uniform(lo, hi)).collect();
        Self::leaf(Arc::new(data), shape, false)
    }

    pub(crate) fn leaf(data: Arc<Vec<T>>, shape: Shape, requires_grad: bool) -> Self {
        Tensor {
            node: Rc::new(Node {
                data,
                shape,
                requires_grad,
                grad: RefCell::new(None),
                op: None,
            }),
        }
    }

    /// Mark a leaf as a trainable parameter. Graph-produced tensors keep
    /// their inferred flag.
    pub fn requires_grad(self) -> Self {
        if self.node.op.is_some() {
            return self; // interior nodes already track requirement
        }
        Tensor {
            node: Rc::new(Node {
                data: Arc::clone(&self.node.data),
                shape: self.node.shape.clone(),
                requires_grad: true,
                grad: RefCell::new(None),
                op: None,
            }),
        }
    }

    /// A leaf copy sharing this tensor's data, detached from the graph.
    pub fn detach(&self) -> Self {
        Self::leaf(Arc::clone(&self.node.data), self.node.shape.clone(), false)
    }

    /// Result node builder: records the op only when a parent needs grads,
    /// so inference graphs carry no backward state and free eagerly.
    pub(crate) fn result(
        data: Vec<T>,
        shape: Shape,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&[T]) + 'static,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.node.requires_grad);
        let op = if requires_grad {
            Some(OpRecord {
                parents,
                backward: Box::new(backward),
            })
        } else {
            None
        };
        Tensor {
            node: Rc::new(Node {
                data: Arc::new(data),
                shape,
                requires_grad,
                grad: RefCell::new(None),
                op,
            }),
        }
    }

    // ── Accessors ───────────────────────────────────────────────────

    pub fn shape(&self) -> &Shape {
        &self.node.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.node.shape.dims()
    }

    pub fn ndim(&self) -> usize {
        self.node.shape.ndim()
    }

    pub fn numel(&self) -> usize {
        self.node.shape.numel()
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.node.data)
    }

    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.node.data[0]
    }

    pub fn requires_grad_flag(&self) -> bool {
        self.node.requires_grad
    }

    /// Clone of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow().clone()
    }

    /// Move the accumulated gradient out, leaving `None`.
    pub fn take_grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow_mut().take()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Cast to another precision as a detached leaf.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data: Vec<U> = self.data().iter().map(|&x| U::from_f64(x.to_f64())).collect();
        Tensor::leaf(Arc::new(data), self.node.shape.clone(), false)
    }

    pub(crate) fn accumulate_grad(&self, src: &[T]) {
        if !self.node.requires_grad {
            return;
        }
        debug_assert_eq!(src.len(), self.numel());
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(src) {
                    *a += *b;
                }
            }
            None => *slot = Some(src.to_vec()),
        }
    }

    pub(crate) fn accumulate_grad_owned(&self, src: Vec<T>) {
        if !self.node.requires_grad {
            return;
        }
        debug_assert_eq!(src.len(), self.numel());
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&src) {
                    *a += *b;
                }
            }
            None => *slot = Some(src),
        }
    }

    // ── Backward pass ───────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Every `requires_grad` tensor
    /// reachable from the loss ends up with a populated gradient.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.node.shape.to_string(),
            });
        }

        // Iterative postorder DFS over parents; reversed postorder is a
        // valid topological order for the backward sweep.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<*const Node<T>> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(Rc::as_ptr(&self.node));
        while let Some((tensor, child_idx)) = stack.pop() {
            let n_parents = tensor.node.op.as_ref().map_or(0, |op| op.parents.len());
            if child_idx < n_parents {
                stack.push((tensor.clone(), child_idx + 1));
                let parent = tensor.node.op.as_ref().unwrap().parents[child_idx].clone();
                if parent.node.requires_grad && visited.insert(Rc::as_ptr(&parent.node)) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(tensor);
            }
        }

        self.accumulate_grad(&[T::ONE]);
        for tensor in order.iter().rev() {
            if let Some(op) = tensor.node.op.as_ref() {
                let grad = tensor.node.grad.borrow();
                if let Some(g) = grad.as_ref() {
                    (op.backward)(g);
                }
            }
        }
        Ok(())
    }
}
