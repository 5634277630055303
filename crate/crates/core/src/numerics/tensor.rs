//! Dense f64 tensor of rank 0, 1, or 2 with an explicit shape and a finiteness
//! invariant: a constructed tensor never holds NaN or infinity.

use crate::error::{CoreError, Result};

/// Dense f64 value with shape `dims` and row-major `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, validating rank (<= 2), element count, and finiteness.
    pub fn from_vec(dims: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if dims.len() > 2 {
            return Err(CoreError::contract(format!(
                "tensor rank {} unsupported (max 2)",
                dims.len()
            )));
        }
        let expect: usize = dims.iter().product();
        if expect != data.len() {
            return Err(CoreError::shape(format!(
                "dims {:?} imply {} elements, got {}",
                dims,
                expect,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CoreError::numeric("tensor holds non-finite values"));
        }
        Ok(Tensor { dims, data })
    }

    /// Rank-1 tensor from a plain vector.
    pub fn vector(data: Vec<f64>) -> Result<Tensor> {
        let n = data.len();
        Tensor::from_vec(vec![n], data)
    }

    /// Rank-2 tensor with `rows * cols` row-major entries.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        Tensor::from_vec(vec![rows, cols], data)
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(dims: Vec<usize>) -> Tensor {
        let n: usize = dims.iter().product();
        Tensor {
            dims,
            data: vec![0.0; n],
        }
    }

    /// Single-element rank-1 tensor.
    pub fn scalar(v: f64) -> Result<Tensor> {
        Tensor::from_vec(vec![1], vec![v])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Entry of a rank-2 tensor.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.dims.len(), 2);
        self.data[row * self.dims[1] + col]
    }
}
