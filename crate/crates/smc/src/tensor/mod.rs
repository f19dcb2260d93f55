//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! The numeric element type is generic: `f64` is the default everywhere
//! (gradient checking demands it), `f32` is the opt-in speed mode.

mod gradcheck;
mod kernels;
mod sgd;
mod tape;

pub use gradcheck::{finite_difference_check, Fault, GradCheckReport, ParamError};
pub use kernels::{log_softmax_rows, matmul_naive, softmax_rows_with_temperature};
pub use sgd::{sgd_step, ParameterSet, SgdHyper};
pub use tape::{Gradients, NodeId, Tape};

use std::fmt;

/// Scalar element of a [`Tensor`]: `f32` or `f64`.
pub trait Elem:
    Copy
    + PartialOrd
    + PartialEq
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    /// Tolerance for probability-row sum checks at this precision.
    const ROW_SUM_TOL: f64;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    fn mul_add(self, a: Self, b: Self) -> Self;

    /// `C <- alpha * A @ B + beta * C` over raw row/column strides.
    ///
    /// # Safety
    /// Pointers must cover `m x k`, `k x n` and `m x n` elements under the
    /// given strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_elem {
    ($t:ty, $gemm:path, $tol:expr) => {
        impl Elem for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const ROW_SUM_TOL: f64 = $tol;
            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn maximum(self, other: Self) -> Self {
                self.max(other)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn mul_add(self, a: Self, b: Self) -> Self {
                <$t>::mul_add(self, a, b)
            }
            unsafe fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_elem!(f32, matrixmultiply::sgemm, 1e-5);
impl_elem!(f64, matrixmultiply::dgemm, 1e-9);

/// Errors raised by tensor construction, tape operations and backward passes.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    LengthMismatch {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("node id {id} does not exist on this tape")]
    DanglingNode { id: usize },
    #[error("backward already ran on this tape; build a new trace")]
    BackwardReplayed,
    #[error("backward is unavailable on an inference (no-grad) tape")]
    GradDisabled,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{what}: invalid hyperparameter value {value}")]
    InvalidHyper { what: &'static str, value: f64 },
    #[error("parameter name {0:?} registered twice")]
    DuplicateParam(String),
}

/// A dense row-major n-d array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E: Elem> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Elem> Tensor<E> {
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![E::ZERO; numel],
        }
    }

    pub fn filled(shape: &[usize], value: E) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::LengthMismatch {
                op: "from_vec",
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_f64_slice(shape: &[usize], values: &[f64]) -> Result<Self, TensorError> {
        Self::from_vec(shape, values.iter().map(|&v| E::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// The single element of a scalar (or one-element) tensor.
    pub fn item(&self) -> E {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn assert_finite(&self, op: &'static str) -> Result<(), TensorError> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    /// Row accessor for a 2-d tensor.
    pub fn row(&self, i: usize) -> &[E] {
        debug_assert_eq!(self.shape.len(), 2);
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub(crate) fn reshaped(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_length() {
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn finite_check_flags_nan() {
        let t = Tensor::<f64>::from_vec(&[2], vec![1.0, f64::NAN]).unwrap();
        assert!(t.assert_finite("test").is_err());
    }

    #[test]
    fn scalar_item() {
        assert_eq!(Tensor::scalar(3.5f64).item(), 3.5);
    }
}
