//! Dense tensors, seeded randomness and the small set of neural primitives
//! the decoder is built from.
//!
//! Tensors are row-major with an explicit shape. Public constructors reject
//! NaN/Inf; kernels inside the crate build results through an unchecked path
//! since their inputs were already validated.

mod ops;
mod params;
mod rng;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

pub use ops::{
    activation, attention_weights, depthwise_conv1d, layer_norm, linear, relu, sigmoid, silu,
    softmax_attention, softplus, Activation, ConvDirection, LinearWeights, NormWeights,
    LAYER_NORM_EPS,
};
pub use params::{count_parameters, join as join_name, ParamVisitor, Parameters, ShapeCollector};
pub use rng::{prng_fill, Distribution, PrngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point element type of a [`Tensor`].
pub trait Real: Float + Sum + Debug + Display + Default + Send + Sync + 'static {
    const DTYPE: DType;

    /// Lossy conversion from `f64`, used for constants.
    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major array with an explicit shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, checking that the shape matches the data length and
    /// that every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(format!(
                "shape {:?} holds {} values but {} were given",
                shape,
                n,
                data.len()
            ));
        }
        let t = Tensor { shape, data };
        t.check_finite("tensor data")?;
        Ok(t)
    }

    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// 2D tensor from rows; all rows must have the same length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return dim_err("ragged rows");
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return dim_err(format!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => dim_err(format!("expected rank 2, got shape {:?}", self.shape)),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => dim_err(format!("expected rank 3, got shape {:?}", self.shape)),
        }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => dim_err(format!("expected rank 4, got shape {:?}", self.shape)),
        }
    }

    /// Size of the last axis (1 for a rank-0 tensor).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// The `i`-th contiguous slice along the last axis.
    pub fn row(&self, i: usize) -> &[T] {
        let w = self.last_dim();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let w = self.last_dim();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, T> {
        self.data.chunks_exact(self.last_dim().max(1))
    }

    fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        idx.iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                assert!(i < n, "index {i} out of bounds for axis of size {n}");
                acc * n + i
            })
    }

    pub fn get(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: T) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return dim_err(format!("shape {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(Tensor {
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
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Euclidean norm of the flattened data.
    pub fn norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    /// Largest elementwise absolute difference. Panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    fn outer_len(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    fn outer_stride(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    /// Rows along axis 0 in reverse order.
    pub fn reverse_outer(&self) -> Self {
        let s = self.outer_stride();
        let mut data = Vec::with_capacity(self.data.len());
        for i in (0..self.outer_len()).rev() {
            data.extend_from_slice(&self.data[i * s..(i + 1) * s]);
        }
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    /// `out[j] = self[idx[j]]` along axis 0.
    pub fn gather_outer(&self, idx: &[usize]) -> Result<Self> {
        let s = self.outer_stride();
        let n = self.outer_len();
        let mut data = Vec::with_capacity(idx.len() * s);
        for &i in idx {
            if i >= n {
                return dim_err(format!("gather index {i} out of range {n}"));
            }
            data.extend_from_slice(&self.data[i * s..(i + 1) * s]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Ok(Tensor { shape, data })
    }

    /// Inverse of [`gather_outer`](Self::gather_outer) for a permutation:
    /// `out[idx[j]] = self[j]`.
    pub fn scatter_outer(&self, idx: &[usize]) -> Result<Self> {
        let s = self.outer_stride();
        let n = self.outer_len();
        if idx.len() != n {
            return dim_err("scatter index length must equal axis 0");
        }
        let mut data = vec![T::zero(); self.data.len()];
        let mut seen = vec![false; n];
        for (j, &i) in idx.iter().enumerate() {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return dim_err("scatter indices are not a permutation");
            }
            data[i * s..(i + 1) * s].copy_from_slice(&self.data[j * s..(j + 1) * s]);
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_length_and_finiteness() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).is_err());
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(Tensor::new(vec![1], vec![f32::INFINITY]).is_err());
        let t = Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(t.get(&[1, 2]), 5.0);
        assert_eq!(t.row(1), &[3.0, 4.0, 5.0]);
        assert_eq!(t.dtype(), DType::F64);
    }

    #[test]
    fn gather_then_scatter_is_identity() {
        let t = Tensor::from_fn(&[4, 2], |i| i as f64);
        let perm = [2, 0, 3, 1];
        let g = t.gather_outer(&perm).unwrap();
        assert_eq!(g.row(0), &[4.0, 5.0]);
        assert_eq!(g.scatter_outer(&perm).unwrap(), t);
        assert!(g.scatter_outer(&[0, 0, 1, 2]).is_err());
    }

    #[test]
    fn reverse_outer_on_rank3() {
        let t = Tensor::from_fn(&[3, 2, 2], |i| i as f64);
        let r = t.reverse_outer();
        assert_eq!(r.get(&[0, 1, 1]), t.get(&[2, 1, 1]));
        assert_eq!(r.reverse_outer(), t);
    }
}
