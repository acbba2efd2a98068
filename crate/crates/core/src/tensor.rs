//! Dense row-major tensors.
//!
//! `f32` is the training dtype; `f64` exists for gradient verification.
//! Reductions and matrix products accumulate left-to-right in index order,
//! which makes every operation bitwise deterministic for fixed inputs.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::iter::Sum;

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::StandardNormal;

/// Element trait for all numeric code in this crate.
pub trait Scalar: Float + FromPrimitive + Sum<Self> + fmt::Debug + fmt::Display + 'static {}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for converting an `f64` literal into the active scalar type.
pub fn fl<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("f64 conversion")
}

/// Errors from tensor construction and tape operations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NumericsError {
    /// Operand shapes are incompatible; names both shapes.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// Axis index out of range for the operand rank.
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    /// An operation produced NaN or Inf.
    NonFinite { op: &'static str },
    /// A scalar was required (e.g. a loss) but the value has more elements.
    NotScalar { op: &'static str, shape: Vec<usize> },
    /// Every row of a loss was ignored, so the mean is undefined.
    EmptyLoss,
    /// Invalid argument value (bad target index, non-positive eps, ...).
    BadValue { op: &'static str, msg: String },
}

impl fmt::Display for NumericsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NumericsError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch between {left:?} and {right:?}")
            }
            NumericsError::InvalidAxis { op, axis, rank } => {
                write!(f, "{op}: axis {axis} invalid for rank {rank}")
            }
            NumericsError::NonFinite { op } => write!(f, "{op}: produced a non-finite value"),
            NumericsError::NotScalar { op, shape } => {
                write!(f, "{op}: expected a scalar, got shape {shape:?}")
            }
            NumericsError::EmptyLoss => write!(f, "loss: every row was ignored"),
            NumericsError::BadValue { op, msg } => write!(f, "{op}: {msg}"),
        }
    }
}

impl core::error::Error for NumericsError {}

/// Dense n-dimensional array, row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self, NumericsError> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(NumericsError::BadValue {
                op: "tensor",
                msg: alloc::format!(
                    "shape {shape:?} does not describe {} stored values",
                    data.len()
                ),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, v: F) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; n],
        }
    }

    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    /// The single stored value; panics if the tensor is not a scalar.
    pub fn item(&self) -> F {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Number of rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.rank(), 2, "rows() on rank-{} tensor", self.rank());
        self.shape[0]
    }

    /// Number of columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.rank(), 2, "cols() on rank-{} tensor", self.rank());
        self.shape[1]
    }

    pub fn at2(&self, r: usize, c: usize) -> F {
        self.data[r * self.shape[1] + c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise conversion to another scalar type (used to run the
    /// f32-trained graph under f64 for gradient checking).
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| G::from_f64(v.to_f64().expect("finite cast")).expect("cast"))
                .collect(),
        }
    }
}

impl<F: Scalar> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(
                f,
                "Tensor{:?} [{} .. {}]",
                self.shape,
                self.data[0],
                self.data[self.data.len() - 1]
            )
        }
    }
}

/// Gaussian-initialized `f32` tensor, `N(0, std^2)` per element.
pub fn randn_tensor(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            (z * std) as f32
        })
        .collect();
    Tensor { shape, data }
}

/// `C[m,n] = A[m,k] * B[k,n]`, accumulating along `k` in ascending order.
pub(crate) fn matmul_raw<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            let crow = &mut c[i * n..(i + 1) * n];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + aip * brow[j];
            }
        }
    }
    c
}

pub(crate) fn transpose_raw<F: Scalar>(x: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_shape() {
        let err = Tensor::<f32>::new(vec![2, 2], vec![1.0, 2.0, 3.0]).unwrap_err();
        assert!(matches!(err, NumericsError::BadValue { .. }));
    }

    #[test]
    fn matmul_raw_hand_product() {
        // [[1,2],[3,4]] * [[0],[1]] = [[2],[4]]
        let c = matmul_raw::<f64>(&[1.0, 2.0, 3.0, 4.0], &[0.0, 1.0], 2, 2, 1);
        assert_eq!(c, vec![2.0, 4.0]);
    }

    #[test]
    fn cast_round_trips_f32() {
        let t = Tensor::<f32>::new(vec![3], vec![0.5, -1.25, 3.0]).unwrap();
        let back: Tensor<f32> = t.cast::<f64>().cast();
        assert_eq!(t, back);
    }
}
