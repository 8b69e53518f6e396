//! Dense tensors with eager reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted row-major array. Every
//! differentiable operation applied to a tensor that requires gradients
//! records a graph node holding its inputs and whatever it needs for the
//! backward pass; [`Tensor::backward`] walks that graph once in reverse
//! topological order and accumulates gradients into the leaves.

mod backward;
pub mod gradcheck;
pub mod io;
pub(crate) mod kernels;
mod ops;

use std::cell::Cell;
use std::fmt;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub(crate) use backward::Op;
pub use ops::{BatchNormMode, RunningStats};

pub struct Tensor<T: Scalar> {
    inner: Arc<Inner<T>>,
}

struct Inner<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    node: Option<Node<T>>,
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) op: Op<T>,
    pub(crate) inputs: Vec<Tensor<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<T> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}

thread_local! {
    static NO_GRAD_DEPTH: Cell<usize> = const { Cell::new(0) };
}

/// Disables graph recording on the current thread while alive.
pub struct NoGradGuard(());

pub fn no_grad() -> NoGradGuard {
    NO_GRAD_DEPTH.with(|d| d.set(d.get() + 1));
    NoGradGuard(())
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        NO_GRAD_DEPTH.with(|d| d.set(d.get() - 1));
    }
}

fn recording() -> bool {
    NO_GRAD_DEPTH.with(|d| d.get() == 0)
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn leaf(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            inner: Arc::new(Inner {
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                node: None,
            }),
        }
    }

    /// Builds the result of an operation, recording a graph node when any
    /// input participates in differentiation.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: Vec<Tensor<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let track = recording() && inputs.iter().any(Tensor::requires_grad);
        let node = track.then(|| Node { op, inputs });
        Tensor {
            inner: Arc::new(Inner {
                shape,
                data,
                requires_grad: track,
                grad: Mutex::new(None),
                node,
            }),
        }
    }

    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(Error::invalid(
                "from_vec",
                format!("shape {shape:?} needs {} elements, got {}", numel(&shape), data.len()),
            ));
        }
        Ok(Self::leaf(shape, data, false))
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self::leaf(shape, vec![value; n], false)
    }

    /// Rank-0 tensor.
    pub fn scalar(value: T) -> Self {
        Self::leaf(Vec::new(), vec![value], false)
    }

    /// A trainable leaf: gradients are accumulated into it by `backward`.
    pub fn param(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        Ok(t.into_param())
    }

    /// Returns a fresh trainable leaf holding the same values.
    pub fn into_param(self) -> Self {
        let shape = self.shape().to_vec();
        let data = self.data().to_vec();
        Self::leaf(shape, data, true)
    }

    /// Returns a fresh non-tracking leaf holding the same values.
    pub fn detach(&self) -> Self {
        Self::leaf(self.shape().to_vec(), self.data().to_vec(), false)
    }

    /// A leaf with the same shape and `requires_grad` flag but new values.
    pub fn with_data(&self, data: Vec<T>) -> Result<Self> {
        if data.len() != self.numel() {
            return Err(Error::invalid(
                "with_data",
                format!("expected {} values, got {}", self.numel(), data.len()),
            ));
        }
        Ok(Self::leaf(self.shape().to_vec(), data, self.requires_grad()))
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.inner.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data().iter().map(|x| x.as_f64()).collect()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.lock().expect("grad lock").clone()
    }

    pub fn grad_tensor(&self) -> Option<Tensor<T>> {
        self.grad()
            .map(|g| Self::leaf(self.shape().to_vec(), g, false))
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad lock") = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.inner.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    pub(crate) fn node(&self) -> Option<&Node<T>> {
        self.inner.node.as_ref()
    }

    pub(crate) fn id(&self) -> usize {
        Arc::as_ptr(&self.inner) as *const () as usize
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|x| x.is_finite())
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.rank());
        let mut flat = 0;
        for (i, (&ix, &d)) in index.iter().zip(self.shape()).enumerate() {
            assert!(ix < d, "index {ix} out of bounds for axis {i} of size {d}");
            flat = flat * d + ix;
        }
        self.data()[flat]
    }

    /// Position-weighted sum `Σ vᵢ·(1 + (i mod 17)/17)`; sensitive to
    /// permutations as well as values, used for golden regression values.
    pub fn checksum(&self) -> f64 {
        self.data()
            .iter()
            .enumerate()
            .map(|(i, v)| v.as_f64() * (1.0 + (i % 17) as f64 / 17.0))
            .sum()
    }

    /// Converts to another scalar type as a non-tracking leaf.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::leaf(
            self.shape().to_vec(),
            self.data().iter().map(|&x| U::lit(x.as_f64())).collect(),
            false,
        )
    }
}
