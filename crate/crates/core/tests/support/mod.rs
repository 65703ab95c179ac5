//! Scalar-loop reference implementations shared by the integration tests.
//! Everything here works on nested `Vec`s and indexes raw weight storage
//! directly so that it shares no arithmetic helpers with the library.

#![allow(dead_code)]

pub mod algorithm1;

use issm::numerics::{LinearWeights, NormWeights};
use issm::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    let cols = *t.shape().last().unwrap();
    t.data().chunks(cols).map(|r| r.to_vec()).collect()
}

pub fn max_abs_diff(a: &Mat, b: &Tensor) -> f64 {
    let flat: Vec<f64> = a.iter().flatten().copied().collect();
    assert_eq!(flat.len(), b.data().len(), "element count");
    flat.iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `y[o] = Σ_i W[o][i]·x[i] + b[o]`.
pub fn lin_row(x: &[f64], w: &LinearWeights) -> Vec<f64> {
    let (out, inp) = (w.weight.shape()[0], w.weight.shape()[1]);
    assert_eq!(x.len(), inp);
    let wd = w.weight.data();
    (0..out)
        .map(|o| {
            let mut acc = 0.0;
            for i in 0..inp {
                acc += wd[o * inp + i] * x[i];
            }
            acc + w.bias.as_ref().map_or(0.0, |b| b.data()[o])
        })
        .collect()
}

pub fn lin(x: &Mat, w: &LinearWeights) -> Mat {
    x.iter().map(|r| lin_row(r, w)).collect()
}

pub fn norm(x: &Mat, w: &NormWeights) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = (var + 1e-5).sqrt();
            r.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / sd * w.gamma.data()[i] + w.beta.data()[i])
                .collect()
        })
        .collect()
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn silu(v: f64) -> f64 {
    v * sigmoid(v)
}

pub fn softplus(v: f64) -> f64 {
    (1.0 + v.exp()).ln()
}

/// Causal depthwise convolution along `order`: step `p` of the order sees
/// itself (tap 0) and the `ks − 1` steps before it.
pub fn causal_conv(x: &Mat, kernel: &Tensor, order: &[usize]) -> Mat {
    let (e, ks) = (kernel.shape()[0], kernel.shape()[1]);
    let mut out = vec![vec![0.0; e]; x.len()];
    for (p, &t) in order.iter().enumerate() {
        for ch in 0..e {
            let mut acc = 0.0;
            for j in 0..ks {
                if j <= p {
                    acc += kernel.data()[ch * ks + j] * x[order[p - j]][ch];
                }
            }
            out[t][ch] = acc;
        }
    }
    out
}

/// Multi-head scaled dot-product self-attention with residual, pre-norm.
pub fn attention_block(h: &Mat, w: &issm::decoder::AttentionWeights, heads: usize) -> Mat {
    let n = norm(h, &w.norm);
    let (q, k, v) = (lin(&n, &w.q), lin(&n, &w.k), lin(&n, &w.v));
    let c = q[0].len();
    let dh = c / heads;
    let mut a = vec![vec![0.0; c]; h.len()];
    for i in 0..h.len() {
        for hd in 0..heads {
            let lo = hd * dh;
            let scores: Vec<f64> = (0..h.len())
                .map(|j| (lo..lo + dh).map(|t| q[i][t] * k[j][t]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = ex.iter().sum();
            for j in 0..h.len() {
                for t in lo..lo + dh {
                    a[i][t] += ex[j] / z * v[j][t];
                }
            }
        }
    }
    let o = lin(&a, &w.out);
    h.iter().zip(&o).map(|(r, d)| r.iter().zip(d).map(|(x, y)| x + y).collect()).collect()
}

/// `t + Out(SiLU(Gate(Norm t)) ⊙ V)`.
pub fn gffn_block(t: &Mat, w: &issm::decoder::GffnWeights, dwconv: bool) -> Mat {
    let n = norm(t, &w.norm);
    let gate = lin(&n, &w.gate);
    let mut value = lin(&n, &w.value);
    if dwconv {
        let order: Vec<usize> = (0..t.len()).collect();
        value = causal_conv(&value, w.conv.as_ref().unwrap(), &order);
    }
    let prod: Mat = gate
        .iter()
        .zip(&value)
        .map(|(g, v)| g.iter().zip(v).map(|(a, b)| silu(*a) * b).collect())
        .collect();
    let o = lin(&prod, &w.out);
    t.iter().zip(&o).map(|(r, d)| r.iter().zip(d).map(|(x, y)| x + y).collect()).collect()
}
