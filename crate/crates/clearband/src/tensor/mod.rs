//! Dense N-dimensional real tensors with reverse-mode automatic
//! differentiation.
//!
//! Every trainable part of the engine is built on this module. The value
//! type [`Tensor`] is immutable after construction and cheap to clone
//! (`Arc`-backed), so values can be shared read-only across threads. The
//! tape in [`graph`] is single-threaded; one graph lives for one training
//! step. Inference never touches a graph.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod kernels;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Immutable dense tensor. `product(shape) == data.len()` always holds.
#[derive(Clone, Debug)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {:?} does not match {} elements",
            shape,
            data.len()
        );
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor::new(vec![], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(shape.to_vec(), vec![S::zero(); shape.iter().product()])
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        Tensor::new(shape.to_vec(), vec![v; shape.iter().product()])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|i| f(i)).collect())
    }

    /// 2D identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut d = vec![S::zero(); n * n];
        for i in 0..n {
            d[i * n + i] = S::one();
        }
        Tensor::new(vec![n, n], d)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
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

    /// Scalar extraction; panics unless the tensor holds exactly one value.
    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor<S>> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{} elements", self.data.len()),
                format!("{:?}", shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Cast element type, rounding through `f64`.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|v| T::of_f64(v.into_f64())).collect(),
        )
    }

    /// Maximum absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor<S>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.into_f64() - b.into_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Strides of a contiguous row-major layout.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn fmt_shape(shape: &[usize]) -> String {
    format!("{:?}", shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_invariant() {
        let t = Tensor::<f32>::zeros(&[2, 3, 4]);
        assert_eq!(t.len(), 24);
        assert_eq!(t.shape(), &[2, 3, 4]);
    }

    #[test]
    #[should_panic]
    fn mismatched_shape_panics() {
        let _ = Tensor::new(vec![2, 2], vec![1.0f32, 2.0, 3.0]);
    }

    #[test]
    fn reshape_shares_data() {
        let t = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64);
        let r = t.reshaped(&[3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(&[4, 2]).is_err());
    }

    #[test]
    fn strides_row_major() {
        assert_eq!(strides(&[4, 3, 2]), vec![6, 2, 1]);
        assert_eq!(strides(&[5]), vec![1]);
        assert_eq!(strides(&[]), Vec::<usize>::new());
    }
}
