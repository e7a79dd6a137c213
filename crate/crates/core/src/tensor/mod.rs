//! Dense tensors, a tape-based reverse-mode autodiff engine, and the
//! parameter store with its Adam optimizer.
//!
//! Everything is `f64` and row-major. Binary elementwise ops accept three
//! right-hand shapes: identical to the left operand, a single row whose
//! length equals the left operand's last dimension (broadcast over rows), or
//! a single element (broadcast everywhere). Nothing else broadcasts.
//!
//! The op layer in [`tape`] is the optimisation seam: kernels live in
//! [`kernels`] and can be swapped without touching model code.

pub mod kernels;
pub mod params;
pub mod tape;

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use params::{AdamConfig, OptimizerState, ParamId, ParameterStore};
pub use tape::{Gradients, MaskId, Segment, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel = numel(&shape);
        if numel != values.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: alloc::format!("shape {:?} needs {} values, got {}", shape, numel, values.len()),
            });
        }
        Ok(Self { shape, values, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self { shape, values: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: Vec::new(), values: vec![v], requires_grad: false, grad: None }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape { op: "from_rows", detail: "ragged rows".into() });
            }
            values.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], values)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// (rows, cols) view of a shape: scalars are 1x1, vectors are one row.
pub fn as_matrix(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => {
            let cols = *shape.last().unwrap();
            (numel(shape) / cols.max(1), cols)
        }
    }
}
