//! Dense f64 tensors and a define-by-run reverse-mode tape.
//!
//! [`Tensor`] is a plain row-major value. Tape participation (gradient
//! buffer, `requires_grad`, node handle) lives in [`Graph`], which hands out
//! [`Var`] handles. A fresh graph is built for every forward pass.

mod gradcheck;
mod graph;
pub(crate) mod kernels;

pub use gradcheck::{finite_difference_check, finite_difference_check_many};
pub use graph::{Graph, Op, Var};

use thiserror::Error;

/// Guard added to norm denominators (layer-norm variance, vector norms).
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{kind}: shape mismatch ({detail})")]
    ShapeMismatch { kind: &'static str, detail: String },
    #[error("unknown primitive kind `{0}`")]
    UnknownKind(String),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss is detached: no tracked leaf reaches it")]
    DetachedLoss,
    #[error("backward already ran on this tape; reset gradients first")]
    BackwardTwice,
    #[error("non-finite function value {value} while probing coordinate {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("invalid tensor: {0}")]
    Invalid(String),
}

pub(crate) fn mismatch(kind: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        kind,
        detail: detail.into(),
    }
}

/// Row-major dense array of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::Invalid(format!(
                "extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Invalid(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Invalid("ragged rows".into()));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    /// 1×n tensor.
    pub fn row_vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(vec![1, n], data).expect("row vector must be nonempty")
    }

    /// 1×1 tensor.
    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![v],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; n]).expect("zero extents")
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![v; n]).expect("zero extents")
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Leading extent for rank ≥ 2, otherwise 1.
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[..self.shape.len() - 1].iter().product()
        } else {
            1
        }
    }

    /// Trailing extent.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("nonempty shape")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// First element; meaningful for scalars.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Rows `start..start+len` as a new tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor {
        let c = self.cols();
        Tensor::matrix(len, c, self.data[start * c..(start + len) * c].to_vec())
            .expect("slice in range")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.rows(), 2);
        assert_eq!(t.cols(), 3);
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(Tensor::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
