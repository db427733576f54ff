//! Dense tensors, a reverse-mode tape, the Adam-style optimizer and the
//! checkpoint format used by both networks.
//!
//! All values are stored row-major. Graph operations treat every tensor as a
//! matrix: the last dimension is the column count and every leading dimension
//! folds into rows, so a rank-1 tensor of length `n` behaves as a `1 x n` row.

pub mod checkpoint;
mod graph;
mod optim;
mod real;

pub use graph::{DropoutStream, Graph, Mode, NormKind, Var};
pub use optim::{clip_grad_norm, grad_norm, Adam, AdamConfig, WarmupSchedule};
pub use real::{Precision, Real};

use crate::error::{ensure, Error, Result};

/// A dense, row-major tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Real> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        ensure!(!shape.is_empty(), "tensor shape must have at least one dimension");
        ensure!(shape.iter().all(|&d| d > 0), "tensor dimensions must be positive, got {shape:?}");
        let len: usize = shape.iter().product();
        ensure!(len == data.len(), "shape {shape:?} needs {len} values, got {}", data.len());
        Ok(Self { shape: shape.to_vec(), data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape, vec![S::zero(); len])
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| S::of(v)).collect())
    }

    pub fn scalar(value: S) -> Self {
        Self { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[S]) -> Result<()> {
        ensure!(
            delta.len() == self.data.len(),
            "gradient of length {} does not match tensor of length {}",
            delta.len(),
            self.data.len()
        );
        let grad = self.grad.get_or_insert_with(|| vec![S::zero(); delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += *d;
        }
        Ok(())
    }

    /// Clears the gradient back to zeros (the buffer is kept).
    pub fn zero_grad(&mut self) {
        if let Some(grad) = self.grad.as_mut() {
            grad.iter_mut().for_each(|g| *g = S::zero());
        }
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite value in {what}")))
        }
    }

    pub fn cast<T: Real>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::of(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self.grad.as_ref().map(|g| g.iter().map(|v| T::of(v.as_f64())).collect()),
        }
    }
}

/// A named, ordered collection of trainable tensors belonging to one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<S> {
    id: u64,
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Real> ParamSet<S> {
    pub fn new() -> Self {
        use std::sync::atomic::{AtomicU64, Ordering};
        static NEXT: AtomicU64 = AtomicU64::new(1);
        Self { id: NEXT.fetch_add(1, Ordering::Relaxed), names: Vec::new(), tensors: Vec::new() }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Registers a tensor; it becomes trainable.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        ParamId { set: self.id, index: self.tensors.len() - 1 }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        debug_assert_eq!(id.set, self.id, "parameter from another set");
        &self.tensors[id.index]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        debug_assert_eq!(id.set, self.id, "parameter from another set");
        &mut self.tensors[id.index]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<S>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Freezes or unfreezes every tensor in the set.
    pub fn set_trainable(&mut self, on: bool) {
        self.tensors.iter_mut().for_each(|t| t.set_requires_grad(on));
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Flat copy of all values, used for bitwise comparisons.
    pub fn snapshot(&self) -> Vec<S> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub(crate) fn set_id(&self, index: usize) -> ParamId {
        ParamId { set: self.id, index }
    }
}

impl<S: Real> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle of one tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId {
    set: u64,
    index: usize,
}

impl ParamId {
    pub fn set(&self) -> u64 {
        self.set
    }

    pub fn index(&self) -> usize {
        self.index
    }
}
