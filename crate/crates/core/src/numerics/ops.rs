use crate::error::{dim_err, Error, Result};

use super::rng::{Distribution, PrngStream};
use super::{prng_fill, Real, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Affine projection `y = x·Wᵀ + b` with `W` stored as `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearWeights<T = f64> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Real> LinearWeights<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>) -> Result<Self> {
        let (out, _) = weight.dims2()?;
        if let Some(b) = &bias {
            if b.shape() != [out] {
                return dim_err(format!(
                    "bias shape {:?} does not match {} output rows",
                    b.shape(),
                    out
                ));
            }
        }
        Ok(LinearWeights { weight, bias })
    }

    pub fn zeros(in_dim: usize, out_dim: usize, bias: bool) -> Self {
        LinearWeights {
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: bias.then(|| Tensor::zeros(&[out_dim])),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Zero the weight matrix and bias in place.
    pub fn zero_out(&mut self) {
        self.weight.data_mut().fill(T::zero());
        if let Some(b) = &mut self.bias {
            b.data_mut().fill(T::zero());
        }
    }
}

impl LinearWeights<f64> {
    /// Uniform(−1/√in, 1/√in) initialization for weights and bias.
    pub fn init(rng: &mut PrngStream, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let dist = Distribution::Uniform {
            low: -bound,
            high: bound,
        };
        let weight = prng_fill(rng, &[out_dim, in_dim], dist).expect("valid bound");
        let bias = bias.then(|| prng_fill(rng, &[out_dim], dist).expect("valid bound"));
        LinearWeights { weight, bias }
    }
}

/// `y[..., o] = Σ_i x[..., i]·w[o, i] + bias[o]`.
pub fn linear<T: Real>(x: &Tensor<T>, w: &LinearWeights<T>) -> Result<Tensor<T>> {
    let in_dim = w.in_dim();
    let out_dim = w.out_dim();
    if x.ndim() == 0 || x.last_dim() != in_dim {
        return dim_err(format!(
            "linear expects last dim {} but input has shape {:?}",
            in_dim,
            x.shape()
        ));
    }
    let rows = x.numel() / in_dim;
    let wd = w.weight.data();
    let mut out = Vec::with_capacity(rows * out_dim);
    for r in 0..rows {
        let xr = x.row(r);
        for o in 0..out_dim {
            let wr = &wd[o * in_dim..(o + 1) * in_dim];
            let mut acc = xr.iter().zip(wr).map(|(&a, &b)| a * b).sum::<T>();
            if let Some(b) = &w.bias {
                acc = acc + b.data()[o];
            }
            out.push(acc);
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out_dim;
    Ok(Tensor::from_raw(shape, out))
}

/// Per-row layer normalization over the last axis followed by `gamma`/`beta`.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let c = x.last_dim();
    if x.ndim() == 0 || c == 0 {
        return dim_err("layer_norm over an empty channel axis");
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return dim_err(format!(
            "layer_norm affine params must have shape [{c}], got {:?} / {:?}",
            gamma.shape(),
            beta.shape()
        ));
    }
    if !(eps > T::zero()) {
        return Err(Error::Config("layer_norm eps must be positive".into()));
    }
    let n = T::of(c as f64);
    let mut out = Vec::with_capacity(x.numel());
    for row in x.rows() {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        for ((&v, &g), &b) in row.iter().zip(gamma.data()).zip(beta.data()) {
            out.push((v - mean) * inv * g + b);
        }
    }
    Ok(Tensor::from_raw(x.shape().to_vec(), out))
}

/// Layer-norm affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NormWeights<T = f64> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Real> NormWeights<T> {
    pub fn identity(c: usize) -> Self {
        NormWeights {
            gamma: Tensor::full(&[c], T::one()),
            beta: Tensor::zeros(&[c]),
        }
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        layer_norm(x, &self.gamma, &self.beta, T::of(LAYER_NORM_EPS))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Softplus,
    Relu,
    Sigmoid,
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn silu<T: Real>(v: T) -> T {
    v * sigmoid(v)
}

/// `log(1 + exp(v))` without overflow. The result is clamped to the smallest
/// positive normal so it stays strictly positive after underflow.
#[inline]
pub fn softplus<T: Real>(v: T) -> T {
    let y = if v > T::of(20.0) {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    };
    y.max(T::min_positive_value())
}

#[inline]
pub fn relu<T: Real>(v: T) -> T {
    v.max(T::zero())
}

pub fn activation<T: Real>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Silu => x.map(silu),
        Activation::Softplus => x.map(softplus),
        Activation::Relu => x.map(relu),
        Activation::Sigmoid => x.map(sigmoid),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvDirection {
    Forward,
    Backward,
}

/// Causal depthwise convolution along the sequence axis of `x: M×E`.
///
/// `kernel[e, j]` weights the input `j` steps in the past, so tap 0 is the
/// current step. The past side is zero padded, keeping the output length M.
/// The backward direction runs the forward convolution on the reversed
/// sequence and reverses the result.
pub fn depthwise_conv1d<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    direction: ConvDirection,
) -> Result<Tensor<T>> {
    let (m, e) = x.dims2()?;
    let (ke, ks) = kernel.dims2()?;
    if ke != e {
        return dim_err(format!("kernel has {ke} channels, input has {e}"));
    }
    if ks == 0 {
        return Err(Error::Config("depthwise kernel size must be >= 1".into()));
    }
    if m == 0 {
        return dim_err("depthwise_conv1d over an empty sequence");
    }
    let src = x.data();
    let kd = kernel.data();
    // Position in the original sequence of step `t` in scan order.
    let pos = |t: usize| match direction {
        ConvDirection::Forward => t,
        ConvDirection::Backward => m - 1 - t,
    };
    let mut out = vec![T::zero(); m * e];
    for t in 0..m {
        let dst = pos(t) * e;
        for j in 0..ks.min(t + 1) {
            let s = pos(t - j) * e;
            for c in 0..e {
                out[dst + c] = out[dst + c] + kd[c * ks + j] * src[s + c];
            }
        }
    }
    Ok(Tensor::from_raw(vec![m, e], out))
}

fn check_attention_shapes<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: Option<&Tensor<T>>,
    heads: usize,
) -> Result<(usize, usize, usize)> {
    let (nq, c) = q.dims2()?;
    let (nk, ck) = k.dims2()?;
    if ck != c {
        return dim_err(format!("query width {c} != key width {ck}"));
    }
    if let Some(v) = v {
        if v.shape() != k.shape() {
            return dim_err(format!(
                "values {:?} must match keys {:?}",
                v.shape(),
                k.shape()
            ));
        }
    }
    if nk == 0 {
        return dim_err("attention over zero keys");
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!(
            "width {c} is not divisible by {heads} heads"
        )));
    }
    Ok((nq, nk, c / heads))
}

/// Multi-head scaled dot-product attention; heads are concatenated.
///
/// Rows of `q` attend over rows of `k`/`v`. Each query row is processed
/// independently with a single score buffer, so memory stays O(Nk).
pub fn softmax_attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<Tensor<T>> {
    let (nq, nk, dh) = check_attention_shapes(q, k, Some(v), heads)?;
    let c = dh * heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut out = vec![T::zero(); nq * c];
    let mut scores = vec![T::zero(); nk];
    for i in 0..nq {
        let qi = q.row(i);
        for h in 0..heads {
            let lo = h * dh;
            let qh = &qi[lo..lo + dh];
            let mut max = T::neg_infinity();
            for (j, s) in scores.iter_mut().enumerate() {
                let kh = &k.row(j)[lo..lo + dh];
                *s = qh.iter().zip(kh).map(|(&a, &b)| a * b).sum::<T>() * scale;
                max = max.max(*s);
            }
            let mut denom = T::zero();
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                denom = denom + *s;
            }
            let acc = &mut out[i * c + lo..i * c + lo + dh];
            for (j, &s) in scores.iter().enumerate() {
                let w = s / denom;
                let vh = &v.row(j)[lo..lo + dh];
                for (a, &b) in acc.iter_mut().zip(vh) {
                    *a = *a + w * b;
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![nq, c], out))
}

/// Softmax attention weights per head, each `Nq × Nk`.
pub fn attention_weights<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    heads: usize,
) -> Result<Vec<Tensor<T>>> {
    let (nq, nk, dh) = check_attention_shapes(q, k, None, heads)?;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut all = Vec::with_capacity(heads);
    for h in 0..heads {
        let lo = h * dh;
        let mut w = Vec::with_capacity(nq * nk);
        for i in 0..nq {
            let qh = &q.row(i)[lo..lo + dh];
            let s: Vec<T> = (0..nk)
                .map(|j| {
                    let kh = &k.row(j)[lo..lo + dh];
                    qh.iter().zip(kh).map(|(&a, &b)| a * b).sum::<T>() * scale
                })
                .collect();
            let max = s.iter().copied().fold(T::neg_infinity(), T::max);
            let e: Vec<T> = s.iter().map(|&v| (v - max).exp()).collect();
            let denom = e.iter().copied().sum::<T>();
            w.extend(e.into_iter().map(|v| v / denom));
        }
        all.push(Tensor::from_raw(vec![nq, nk], w));
    }
    Ok(all)
}
