//! Dense row-major f64 tensor, the universal value carrier.
//!
//! Data lives behind an `Arc` so clones, detached views and tape-retained
//! buffers all share one allocation. A tensor is immutable once built;
//! parameter updates construct fresh tensors.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Index of a value slot on a tape.
pub type ValueId = usize;

/// Handle tying a tensor to the tape that produced (or watched) it.
///
/// The generation field guards against accidentally mixing tapes: a handle
/// from one tape is treated as absent by any other.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeRef {
    pub(crate) tape_gen: u64,
    pub(crate) value: ValueId,
}

#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    node: Option<NodeRef>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Build a tensor from a shape and row-major data. `requires_grad` is
    /// false; promote with [`Tensor::with_grad`].
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Dim(format!("zero extent in shape {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::Dim(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            node: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = numel(&shape);
        Tensor::new(shape, vec![0.0; n]).expect("zeros: consistent by construction")
    }

    pub fn ones(shape: Vec<usize>) -> Tensor {
        let n = numel(&shape);
        Tensor::new(shape, vec![1.0; n]).expect("ones: consistent by construction")
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![1], vec![v]).expect("scalar")
    }

    /// 2-D tensor from nested rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::Dim("from_rows: no rows".into()));
        }
        let c = rows[0].len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::Dim("from_rows: ragged rows".into()));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), c], data)
    }

    pub fn with_grad(mut self) -> Tensor {
        self.requires_grad = true;
        self
    }

    pub fn with_requires_grad(mut self, rg: bool) -> Tensor {
        self.requires_grad = rg;
        self
    }

    /// Value-only view: same storage, no gradient participation, no tape tie.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            requires_grad: false,
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> &Arc<Vec<f64>> {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Bytes at training precision (64-bit).
    pub fn byte_len(&self) -> usize {
        self.data.len() * std::mem::size_of::<f64>()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn node(&self) -> Option<NodeRef> {
        self.node
    }

    pub(crate) fn with_node(mut self, node: NodeRef) -> Tensor {
        self.node = Some(node);
        self
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    /// Row count for 2-D tensors.
    pub fn rows(&self) -> Result<usize> {
        self.dim2().map(|(r, _)| r)
    }

    /// Column count for 2-D tensors.
    pub fn cols(&self) -> Result<usize> {
        self.dim2().map(|(_, c)| c)
    }

    pub fn dim2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Dim(format!("expected 2-D tensor, got {other:?}"))),
        }
    }

    pub fn dim3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [a, b, c] => Ok((*a, *b, *c)),
            other => Err(Error::Dim(format!("expected 3-D tensor, got {other:?}"))),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality of shape and payload.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Max absolute elementwise difference (shapes must match).
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
