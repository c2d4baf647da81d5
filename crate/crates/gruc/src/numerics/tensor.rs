//! Dense row-major `f64` tensors.
//!
//! Only rank 1 and rank 2 ever occur in this crate (vectors, matrices, and
//! one-element vectors standing in for scalars), but shape is kept general.
//! Shape is fixed at construction; no view or reshape machinery exists.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Zero-filled tensor. Empty shapes and zero dimensions are allowed here;
    /// operations that cannot handle them reject at their own boundary.
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    /// Rank-1 tensor owning `data`.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// One-element rank-1 tensor. Scalars on the tape are just this.
    pub fn scalar(value: f64) -> Self {
        Tensor::vector(vec![value])
    }

    /// Rank-2 tensor from row-major `data`.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dimension(
                "Tensor::matrix",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Tensor {
            shape: vec![rows, cols],
            data,
        })
    }

    /// Arbitrary-rank tensor; `data` length must match the shape product.
    pub fn from_shape(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::dimension(
                "Tensor::from_shape",
                format!("shape {shape:?} needs {expect} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the values. The shape stays frozen; only optimizer
    /// updates and initializers go through here.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> Result<usize> {
        match self.shape.as_slice() {
            [r, _] => Ok(*r),
            other => Err(Error::dimension(
                "Tensor::rows",
                format!("expected rank 2, got shape {other:?}"),
            )),
        }
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> Result<usize> {
        match self.shape.as_slice() {
            [_, c] => Ok(*c),
            other => Err(Error::dimension(
                "Tensor::cols",
                format!("expected rank 2, got shape {other:?}"),
            )),
        }
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::dimension(
                "Tensor::item",
                format!("expected one element, got shape {:?}", self.shape),
            ))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
