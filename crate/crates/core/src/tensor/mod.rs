//! Dense float64 tensors and the reverse-mode differentiation graph built on them.

mod container;
mod graph;

pub use container::{load_named_tensors, save_named_tensors, CHECKPOINT_MAGIC};
pub use graph::{logit_scalar, sigmoid_scalar, Graph, Var};

use crate::error::{Error, Result};

/// Row-major n-dimensional array of 64-bit floats.
///
/// A rank-0 tensor (empty shape) is a scalar holding exactly one value.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?} (expects {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Value of a rank-0 tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::Shape(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Index into a rank-3 tensor laid out as `[C, H, W]`.
    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        let (_, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    /// Index into a rank-2 tensor laid out as `[H, W]`.
    #[inline]
    pub fn at2(&self, y: usize, x: usize) -> f64 {
        let w = self.shape[1];
        self.data[y * w + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// A named trainable tensor with an additively accumulated gradient slot.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        for g in self.grad.data_mut() {
            *g = 0.0;
        }
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn scalar_roundtrip() {
        let s = Tensor::scalar(4.25);
        assert!(s.is_scalar());
        assert_eq!(s.scalar_value().unwrap(), 4.25);
        assert_eq!(s.numel(), 1);
    }

    #[test]
    fn parameter_grad_matches_shape() {
        let p = Parameter::new("w", Tensor::zeros(&[3, 2, 5, 5]));
        assert_eq!(p.grad.shape(), p.value.shape());
    }
}
