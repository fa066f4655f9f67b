//! Dense fp64 values of rank 1 or 2, row-major.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn vector(data: Vec<f64>) -> Tensor {
        assert!(!data.is_empty(), "vector must be non-empty");
        Tensor {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape {
                op: "matrix",
                msg: format!("dimensions must be positive, got {rows}x{cols}"),
            });
        }
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "matrix",
                msg: format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            });
        }
        Ok(Tensor {
            dims: vec![rows, cols],
            data,
        })
    }

    pub fn zeros_vector(n: usize) -> Tensor {
        Tensor::vector(vec![0.0; n])
    }

    pub fn zeros_matrix(rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, vec![0.0; rows * cols]).expect("consistent by construction")
    }

    pub fn scalar(x: f64) -> Tensor {
        Tensor::vector(vec![x])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn is_vector(&self) -> bool {
        self.dims.len() == 1
    }

    pub fn is_matrix(&self) -> bool {
        self.dims.len() == 2
    }

    /// Row count for matrices, length for vectors.
    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    /// Column count; 1 for vectors.
    pub fn cols(&self) -> usize {
        if self.is_matrix() {
            self.dims[1]
        } else {
            1
        }
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

    pub fn row(&self, r: usize) -> &[f64] {
        debug_assert!(self.is_matrix());
        let c = self.dims[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Exact equality of every bit pattern.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
