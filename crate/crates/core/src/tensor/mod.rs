//! Dense tensors and the scalar abstraction.
//!
//! The whole engine is generic over [`Scalar`] so the same code path runs in
//! f32 for training and in f64 for finite-difference gradient verification.
//! Tensors are plain row-major buffers; all structure (autodiff, parameters,
//! optimizers) lives in the submodules.

pub mod kernels;
pub mod optim;
pub mod param;
pub mod tape;

use crate::error::{Error, Result};
use num_traits::{Float, NumCast};
use rand::Rng;
use rand_distr::StandardNormal;

/// Floating-point element type for the engine (f32 or f64).
pub trait Scalar:
    Float + NumCast + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static
{
    fn from_f64(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("f64 -> scalar conversion")
    }
    fn to_f64(self) -> f64 {
        <f64 as NumCast>::from(self).expect("scalar -> f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand used throughout the crate for lossy f64 -> S conversion.
#[inline]
pub(crate) fn sc<S: Scalar>(x: f64) -> S {
    S::from_f64(x)
}

/// A dense row-major tensor. Shape `[d0, d1, ..., dn]` with `data.len()`
/// equal to the product of the dimensions. A scalar is shape `[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// Build a tensor, checking that the buffer matches the shape.
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if shape.is_empty() || expect != data.len() {
            return Err(Error::InvalidShape {
                op: "Tensor::new",
                shape: shape.clone(),
                detail: format!("buffer has {} elements, shape wants {}", data.len(), expect),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![S::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Gaussian init with the given standard deviation. Samples are drawn in
    /// f64 and narrowed, so f32 and f64 tensors see the same stream.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                sc::<S>(z * std)
            })
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// First element; convenient for `[1]`-shaped losses.
    pub fn item(&self) -> S {
        self.data[0]
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if shape.is_empty() || expect != self.data.len() {
            return Err(Error::InvalidShape {
                op: "Tensor::reshaped",
                shape,
                detail: format!("tensor has {} elements", self.data.len()),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Convert elements to another scalar type (used by tests to lift f32
    /// fixtures into f64).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| sc::<T>(x.to_f64())).collect(),
        }
    }
}
