//! Dense `f32` tensors and a define-by-run reverse-mode tape.

pub(crate) mod kernels;
mod tape;

pub use tape::{NodeId, Tape, Var};

use crate::{Error, Result};

/// Dense row-major `f32` array.
///
/// A tensor that does not require grad never holds a gradient buffer;
/// [`Tensor::accumulate_grad`] is a no-op for it.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    /// Builds a tensor, checking that every extent is positive and that the
    /// element count matches. An empty shape is a scalar.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("full: positive extents")
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f32) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self::new(shape, (0..n).map(&mut f).collect()).expect("from_fn: positive extents")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Turning gradient tracking off also drops any stored gradient.
    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn accumulate_grad(&mut self, g: &[f32]) -> Result<()> {
        if !self.requires_grad {
            return Ok(());
        }
        if g.len() != self.data.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("gradient has {} values, tensor {}", g.len(), self.data.len()),
            ));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Same values under a different shape with equal element count.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    /// Copy of the values without gradient state.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Rows `idx` of the leading axis, gathered into a new tensor.
    pub fn select(&self, idx: &[usize]) -> Result<Tensor> {
        if self.shape.is_empty() || idx.is_empty() {
            return Err(Error::InvalidArgument("select needs a non-scalar tensor and at least one index".into()));
        }
        let row: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(row * idx.len());
        for &i in idx {
            if i >= self.shape[0] {
                return Err(Error::InvalidArgument(format!(
                    "select index {i} out of range for leading extent {}",
                    self.shape[0]
                )));
            }
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor::new(shape, data)
    }

    /// CRC-32 of the shape and the little-endian value bytes.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for &d in &self.shape {
            h.update(&(d as u64).to_le_bytes());
        }
        for v in &self.data {
            h.update(&v.to_le_bytes());
        }
        h.finalize()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_length() {
        assert!(Tensor::new([2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new([2, 0], vec![]).is_err());
        assert!(Tensor::new(Vec::<usize>::new(), vec![1.0]).is_ok());
    }

    #[test]
    fn frozen_tensor_never_accumulates() {
        let mut t = Tensor::zeros([3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        assert!(t.grad().is_none());
        let mut t = t.with_requires_grad();
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0, 6.0]);
        t.set_requires_grad(false);
        assert!(t.grad().is_none());
    }

    #[test]
    fn select_rows() {
        let t = Tensor::from_fn([3, 2], |i| i as f32);
        let s = t.select(&[2, 0]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[4.0, 5.0, 0.0, 1.0]);
    }
}
