//! Dense row-major tensors over `f32` or `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Floating point element type. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Central finite-difference step suited to the precision.
    const FD_STEP: f64;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }

    fn from_usize_lossy(v: usize) -> Self {
        Self::from_usize(v).expect("finite conversion")
    }
}

impl Scalar for f32 {
    const FD_STEP: f64 = 1e-3;
}

impl Scalar for f64 {
    const FD_STEP: f64 = 1e-6;
}

/// A dense n-dimensional array.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", "element count", numel, data.len()));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Samples `N(0, std^2)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64_lossy(z * std)
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Samples uniform entries in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(rng.random_range(lo..hi)))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// The single value of a scalar (or one-element) tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::shape("item", "element count", 1, self.data.len()));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape("reshape", "element count", self.data.len(), numel));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.expect_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    /// Gathers rows of the leading axis.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let n = self.shape[0];
        let stride = if n == 0 { 0 } else { self.data.len() / n };
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Self { shape, data }
    }

    /// Stacks tensors along the leading axis.
    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows", "no tensors given"))?;
        let tail = &first.shape[1..];
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::invalid(
                    "concat_rows",
                    format!("trailing shape {:?} differs from {:?}", &p.shape[1..], tail),
                ));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Self { shape, data })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    pub(crate) fn expect_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape.len() != other.shape.len() {
            return Err(Error::shape(op, "rank", self.shape.len(), other.shape.len()));
        }
        for (axis, (&a, &b)) in self.shape.iter().zip(&other.shape).enumerate() {
            if a != b {
                return Err(Error::shape(op, format!("axis {axis}"), a, b));
            }
        }
        Ok(())
    }
}

/// A trainable tensor together with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar = f32> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Self { value, grad: None }
    }

    /// Adds `g` into the accumulator.
    pub fn accumulate(&mut self, g: &Tensor<T>) -> Result<()> {
        self.value.expect_same_shape(g, "accumulate")?;
        match &mut self.grad {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + b;
                }
            }
            None => self.grad = Some(g.clone()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

impl<T: Scalar> From<Tensor<T>> for Param<T> {
    fn from(value: Tensor<T>) -> Self {
        Self::new(value)
    }
}
