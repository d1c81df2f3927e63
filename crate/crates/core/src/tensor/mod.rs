//! Dense `f64` tensors and a reverse-mode differentiation tape.
//!
//! [`Tensor`] is a plain immutable value (shape + row-major data behind an
//! `Arc`). Differentiation happens on a [`Tape`]: values enter it as leaves
//! or parameters and every operation on a [`Var`] appends one node holding
//! its backward rule.

mod gradcheck;
pub(crate) mod kernels;
mod ops;
mod tape;

use std::sync::Arc;

use thiserror::Error;

use crate::rng::SplitMix64;

pub use gradcheck::{check_gradient, finite_diff_gradient, relative_error, GradCheck};
pub use tape::{BackwardFn, Gradients, Tape, Var};

/// Guard used by `log`, `sqrt` and `div` to keep results finite.
pub const CLAMP_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid shape {0:?}: every dimension must be >= 1")]
    InvalidShape(Vec<usize>),
    #[error("dimension overflow for shape {0:?}")]
    DimOverflow(Vec<usize>),
    #[error("shape {shape:?} needs {expected} values, got {got}")]
    ValueCount {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("incompatible shapes {0:?} and {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("invalid axis {axis} for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("range {start}..{end} out of bounds for axis of size {size}")]
    OutOfRange {
        start: usize,
        end: usize,
        size: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss does not depend on any value that requires grad")]
    Detached,
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Initializer for [`Tensor::create`].
#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    Zeros,
    Full(f64),
    FromValues(Vec<f64>),
    Gaussian { mean: f64, std: f64, seed: u64 },
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

pub(crate) fn checked_numel(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(TensorError::InvalidShape(shape.to_vec()));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| TensorError::DimOverflow(shape.to_vec()))
}

impl Tensor {
    pub fn create(shape: &[usize], init: Init) -> Result<Self> {
        let n = checked_numel(shape)?;
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Full(c) => vec![c; n],
            Init::FromValues(v) => {
                if v.len() != n {
                    return Err(TensorError::ValueCount {
                        shape: shape.to_vec(),
                        expected: n,
                        got: v.len(),
                    });
                }
                v
            }
            Init::Gaussian { mean, std, seed } => {
                let mut rng = SplitMix64::new(seed);
                (0..n).map(|_| rng.gaussian(mean, std)).collect()
            }
        };
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::create(shape, Init::FromValues(data))
    }

    /// Panicking constructor for shapes known to be valid.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::create(shape, Init::Zeros).expect("valid shape")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::create(shape, Init::Full(value)).expect("valid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn gaussian(shape: &[usize], mean: f64, std: f64, seed: u64) -> Self {
        Self::create(shape, Init::Gaussian { mean, std, seed }).expect("valid shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|arc| arc.as_ref().clone())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n = checked_numel(shape)?;
        if n != self.numel() {
            return Err(TensorError::ShapeMismatch(self.shape.clone(), shape.to_vec()));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    /// Elementwise combination with numpy-style broadcasting.
    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        kernels::broadcast_binary(self, other, f)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|x| x * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Round every element through `f32`.
    pub fn to_f32_precision(&self) -> Self {
        self.map(|x| x as f32 as f64)
    }

    /// Sum over `axes`, keeping reduced axes as size 1.
    pub fn sum_axes_keepdim(&self, axes: &[usize]) -> Result<Self> {
        let target = kernels::reduced_shape(&self.shape, axes)?;
        Ok(kernels::sum_to_shape(self, &target))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        kernels::permute(self, axes)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        kernels::matmul(self, other)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn create_variants() {
        let z = Tensor::create(&[2, 2], Init::Zeros).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        let f = Tensor::create(&[3], Init::Full(1.5)).unwrap();
        assert_eq!(f.data(), &[1.5, 1.5, 1.5]);
        let g1 = Tensor::create(&[4], Init::Gaussian { mean: 0.0, std: 1.0, seed: 7 }).unwrap();
        let g2 = Tensor::create(&[4], Init::Gaussian { mean: 0.0, std: 1.0, seed: 7 }).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&g1), bits(&g2));
    }

    #[test]
    fn create_errors() {
        assert!(matches!(
            Tensor::create(&[2, 2], Init::FromValues(vec![1.0; 3])),
            Err(TensorError::ValueCount { expected: 4, got: 3, .. })
        ));
        assert!(matches!(
            Tensor::create(&[usize::MAX, 4], Init::Zeros),
            Err(TensorError::DimOverflow(_))
        ));
        assert!(matches!(
            Tensor::create(&[], Init::Zeros),
            Err(TensorError::InvalidShape(_))
        ));
        assert!(matches!(
            Tensor::create(&[3, 0], Init::Zeros),
            Err(TensorError::InvalidShape(_))
        ));
    }

    #[test]
    fn reshape_shares_values() {
        let t = Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = t.reshape(&[2, 2]).unwrap();
        assert_eq!(r.shape(), &[2, 2]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(&[3]).is_err());
    }
}
