//! Dense row-major `f64` tensors.
//!
//! This is deliberately minimal: a shape vector plus a flat buffer, with just
//! the accessors the differentiation graph and the numeric modules need.
//! Everything in the crate runs in `f64`; there is no broadcasting beyond the
//! few explicit row/column operations the graph defines.

use crate::error::{Error, Result};

/// Shape plus row-major buffer. Most of the crate works with rank-2 tensors
/// (matrices); vectors are carried as `1 x d` where a graph operation needs
/// them, and scalars as `1 x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and a row-major buffer.
    ///
    /// Panics if the buffer length does not match the shape product; that is
    /// a programming error, not a data error.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor shape {shape:?} implies {numel} elements, got {}",
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// A `1 x 1` tensor holding one value.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::new(&[1, 1], vec![value])
    }

    /// A `1 x d` row vector.
    pub fn row(values: &[f64]) -> Tensor {
        Tensor::new(&[1, values.len()], values.to_vec())
    }

    /// An `n x d` matrix from row slices; panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Tensor {
        assert!(!rows.is_empty(), "from_rows needs at least one row");
        let d = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.len(), d, "row {i} has length {}, expected {d}", r.len());
            data.extend_from_slice(r);
        }
        Tensor::new(&[rows.len(), d], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// True for rank-2 tensors.
    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Number of rows of a rank-2 tensor; panics otherwise.
    pub fn rows(&self) -> usize {
        assert!(self.is_matrix(), "rows() on tensor of shape {:?}", self.shape);
        self.shape[0]
    }

    /// Number of columns of a rank-2 tensor; panics otherwise.
    pub fn cols(&self) -> usize {
        assert!(self.is_matrix(), "cols() on tensor of shape {:?}", self.shape);
        self.shape[1]
    }

    /// Element accessor for rank-2 tensors.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert!(self.is_matrix());
        self.data[i * self.shape[1] + j]
    }

    /// Row slice of a rank-2 tensor.
    pub fn row_slice(&self, i: usize) -> &[f64] {
        debug_assert!(self.is_matrix());
        let d = self.shape[1];
        &self.data[i * d..(i + 1) * d]
    }

    /// The single value of a `1 x 1` tensor; panics otherwise.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// In-place elementwise accumulation; shapes must match exactly.
    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Norm below which a vector is considered degenerate for normalization.
pub const NORM_FLOOR: f64 = 1e-12;

/// Euclidean norm of a slice, accumulated left to right.
pub fn l2_norm(v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &x in v {
        acc += x * x;
    }
    acc.sqrt()
}

/// Scales a vector to unit Euclidean norm.
///
/// Errors with [`Error::DegenerateNorm`] when the norm is below `1e-12`,
/// because the direction of such a vector carries no information.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = l2_norm(v);
    if n < NORM_FLOOR {
        return Err(Error::DegenerateNorm {
            context: "l2_normalize",
            row: 0,
        });
    }
    Ok(v.iter().map(|&x| x / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        let t = Tensor::new(&[2, 3], vec![0.0; 6]);
        assert_eq!(t.rows(), 2);
        assert_eq!(t.cols(), 3);
        assert_eq!(t.numel(), 6);
    }

    #[test]
    #[should_panic(expected = "implies 6 elements")]
    fn new_rejects_wrong_length() {
        let _ = Tensor::new(&[2, 3], vec![0.0; 5]);
    }

    #[test]
    fn at_is_row_major() {
        let t = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(t.at(0, 2), 3.0);
        assert_eq!(t.at(1, 0), 4.0);
        assert_eq!(t.row_slice(1), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn normalize_three_four_five() {
        let z = l2_normalize(&[3.0, 4.0]).unwrap();
        assert_eq!(z, vec![0.6, 0.8]);
    }

    #[test]
    fn normalize_unit_vector_is_identity_within_1e15() {
        let v = [1.0 / 3.0_f64.sqrt(); 3];
        let z = l2_normalize(&v).unwrap();
        for (a, b) in z.iter().zip(v.iter()) {
            assert!((a - b).abs() <= 1e-15);
        }
        assert!((l2_norm(&z) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn normalize_zero_vector_errors() {
        let err = l2_normalize(&[0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::DegenerateNorm { .. }));
    }
}
