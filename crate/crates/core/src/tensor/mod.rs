//! Dense row-major tensors with optional tape attachment.
//!
//! A [`Tensor`] is an immutable value: `shape` plus `Arc`-shared storage.
//! When a tensor was produced by an operation recorded on a
//! [`GradientTape`] it additionally carries the id of its tape node, so
//! further operations extend the tape and `tape.backward(&loss)` can route
//! gradients back to every registered parameter.

pub mod ops;
mod tape;

pub use ops::*;
pub use tape::{GradientTape, Gradients};

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use tape::TapeNode;

#[derive(Clone)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    pub(crate) node: Option<TapeNode<T>>,
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", &self.data[..])?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::dim(
                "from_vec",
                format!("shape {:?} wants {} values, got {}", shape, expect, data.len()),
            ));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim("from_vec", format!("zero-sized axis in {:?}", shape)));
        }
        Ok(Tensor { shape: shape.to_vec(), data: Arc::new(data), node: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![T::zero(); n]), node: None }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![v; n]), node: None }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    /// Rank-1 single-element tensor (scalars live as shape `[1]`).
    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], data: Arc::new(vec![v]), node: None }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n).map(&mut f).collect();
        Tensor { shape: shape.to_vec(), data: Arc::new(data), node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn value(&self) -> T {
        debug_assert_eq!(self.data.len(), 1, "value() on non-scalar tensor");
        self.data[0]
    }

    /// Same values, no tape attachment.
    pub fn detached(&self) -> Self {
        Tensor { shape: self.shape.clone(), data: Arc::clone(&self.data), node: None }
    }

    /// Mutable access to the storage (copy-on-write). Mutation severs any
    /// tape attachment: the edited tensor is a fresh value.
    pub fn data_mut(&mut self) -> &mut [T] {
        self.node = None;
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Convert element type (used at the data/model precision boundary).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data: Vec<U> = self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data), node: None }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Max absolute difference; shapes must match.
    pub fn linf_diff(&self, other: &Self) -> T {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), |m, d| if d > m { d } else { m })
    }

    /// Strict value equality (== on every element, so -0.0 equals 0.0).
    pub fn value_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.data.iter().zip(other.data.iter()).all(|(a, b)| a == b)
    }

    /// Bitwise equality of the underlying storage.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(&a, &b)| a.to_f64().to_bits() == b.to_f64().to_bits())
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data: Arc::new(data), node: None }
    }
}

/// Interpret a rank-3 tensor as channels × height × width.
pub fn chw<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::dim(op, format!("expected C×H×W tensor, got shape {:?}", s))),
    }
}

/// Interpret a rank-2 tensor as rows × cols.
pub fn rc<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(op, format!("expected rank-2 tensor, got shape {:?}", s))),
    }
}
