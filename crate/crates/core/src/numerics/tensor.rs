//! Dense row-major f64 tensor.

use crate::error::{Error, Result};

/// A dense tensor of 64-bit floats in row-major order.
///
/// A scalar is represented by an empty shape. Public constructors reject
/// non-finite values and shape/data length disagreements.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                expected: shape.clone(),
                got: vec![data.len()],
            });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid("tensor extents must be positive"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("tensor contains non-finite values"));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("tensor rows"));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::ShapeMismatch {
                expected: shape,
                got: self.shape.clone(),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// Exact bit equality, distinguishing 0.0 from -0.0 and treating NaN
    /// as equal to itself. Used by determinism tests.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
