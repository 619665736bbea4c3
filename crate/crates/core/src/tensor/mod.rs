//! Dense tensors and the reverse-mode tape that differentiates through them.

mod backward;
mod gradcheck;
/// Raw-slice matmul and convolution kernels behind the tape ops.
pub mod kernels;
mod tape;

pub use gradcheck::{grad_check, grad_check_many};
pub use tape::{onehot_to_labels, BatchMoments, GradMode, Tape, Var};

use crate::error::{Error, Result};

/// Dense row-major array of `f64` values.
///
/// The shape may be empty, in which case the tensor is a scalar holding one
/// value.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::domain(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![values.len()],
            });
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            values: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![values.len()],
            values,
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of rows along the leading (batch) axis.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Returns the same data under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.values.clone())
    }

    /// Selects rows of the leading axis, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let n = self.batch();
        let row_len = self.values.len() / n;
        let mut values = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            if r >= n {
                return Err(Error::domain(format!("row {r} out of range for batch {n}")));
            }
            values.extend_from_slice(&self.values[r * row_len..(r + 1) * row_len]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor::new(shape, values)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Channel layout shared by the statistics ops: axis 0 is the batch, axis 1
/// the channel, and any trailing axes are spatial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelLayout {
    pub batch: usize,
    pub channels: usize,
    pub spatial: usize,
}

impl ChannelLayout {
    pub fn of(shape: &[usize]) -> Result<Self> {
        if shape.len() < 2 {
            return Err(Error::domain(format!(
                "expected batch and channel axes, got shape {shape:?}"
            )));
        }
        Ok(ChannelLayout {
            batch: shape[0],
            channels: shape[1],
            spatial: shape[2..].iter().product(),
        })
    }

    /// Number of elements reduced per channel.
    pub fn count(&self) -> usize {
        self.batch * self.spatial
    }

    #[inline]
    pub fn channel_of(&self, flat: usize) -> usize {
        (flat / self.spatial) % self.channels
    }
}
