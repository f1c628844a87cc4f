//! Dense row-major `f64` tensors and a tape-based reverse-mode autodiff graph.
//!
//! Tensors are plain values. Differentiation happens on a [`Graph`]: leaves
//! are registered with [`Graph::leaf`], primitives append nodes, and
//! [`Graph::backward`] walks the tape in reverse, filling the gradient of every
//! leaf that was registered with `requires_grad`.
//!
//! ```
//! use mabn::tensor::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::scalar(3.0), true);
//! let y = g.mul(x, x).unwrap();
//! g.backward(y).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[6.0]);
//! ```

mod gradcheck;
mod graph;
mod kernels;
mod optim;

pub use gradcheck::{finite_diff_grad, relative_error};
pub use graph::{Bcast, Graph, OpKind, Var};
pub use optim::{adam_step, sgd_step, AdamState};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, checking `product(shape) == values.len()` and finiteness.
    pub fn new(shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::shape(
                "tensor_create",
                format!("shape {:?} holds {} values, got {}", shape, numel, values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor_create" });
        }
        Ok(Self { shape: shape.to_vec(), data: values, requires_grad, grad: None })
    }

    /// Unchecked constructor for kernels whose output is known to be well formed.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data, requires_grad: false, grad: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self::from_parts(vec![values.len()], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        debug_assert!(grad.as_ref().is_none_or(|g| g.len() == self.data.len()));
        self.grad = grad;
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::NotScalar { numel: self.data.len() });
        }
        Ok(self.data[0])
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", self.shape, shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Copies rows `indices` of the leading axis into a new tensor.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let rows = *self.shape.first().ok_or_else(|| Error::shape("select_rows", "rank 0"))?;
        let stride = self.data.len().checked_div(rows).unwrap_or(0);
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= rows {
                return Err(Error::shape("select_rows", format!("row {i} out of range for {rows} rows")));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Self::from_parts(shape, data))
    }

    /// Counter-clockwise quarter turns of every `[s, s]` plane, or of every
    /// row of an `[n, 2]` point set.
    pub fn rot90(&self, k: usize) -> Result<Self> {
        let data = graph::rotate_any(&self.data, &self.shape, k)?;
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn create_echoes_shape() {
        let t = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0], false).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(t.grad().is_none());
    }

    #[test]
    fn empty_tensor_is_valid() {
        let t = Tensor::new(&[0], vec![], false).unwrap();
        assert_eq!(t.numel(), 0);
    }

    #[test]
    fn nan_is_rejected() {
        let err = Tensor::new(&[2], vec![1.0, f64::NAN], false).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn wrong_count_is_rejected() {
        let err = Tensor::new(&[2, 3], vec![0.0; 5], false).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn select_rows_copies_blocks() {
        let t = Tensor::new(&[3, 2], vec![0., 1., 2., 3., 4., 5.], false).unwrap();
        let s = t.select_rows(&[2, 0]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[4., 5., 0., 1.]);
    }
}
