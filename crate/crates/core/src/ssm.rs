//! Discretized state space recurrence with a state-expanded timescale.
//!
//! For scene step `t`, state `k` and channel `e`:
//!
//! ```text
//! h_t[k, e] = a_bar[t, k, e] · h_{t−1}[k, e] + b_bar[t, k, e] · x_t[e]
//! y_t[e]    = Σ_k c[t, k] · h_t[k, e]
//! ```
//!
//! `a_bar`/`b_bar` carry one value per (step, state, channel), so each state
//! decides per step how much of the input it absorbs.

use log::warn;
use rayon::prelude::*;

use crate::error::{dim_err, Error, Result};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DiscretizeMode {
    /// Zero-order hold: `b_bar = (δa)⁻¹(exp(δa) − 1)·δ·b`.
    Exact,
    /// `b_bar = δ·b`, the first-order form used by the bidirectional scan.
    #[default]
    Euler,
}

/// `exp(z) − 1` over `z`, continuous at zero.
fn expm1_over<T: Real>(z: T) -> T {
    if z.abs() < T::of(1e-5) {
        T::one() + z * (T::of(0.5) + z / T::of(6.0))
    } else {
        z.exp_m1() / z
    }
}

/// Discretizes `(delta: M×K×E, a: E, b: M×K)` into `(a_bar, b_bar)`, both M×K×E.
///
/// `a_bar = exp(delta·a)` in both modes. A positive `a` is unstable in the
/// continuous sense; it is logged and computed anyway.
pub fn discretize_zoh<T: Real>(
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    mode: DiscretizeMode,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, k, e) = delta.dims3()?;
    if a.shape() != [e] {
        return dim_err(format!("A must have shape [{e}], got {:?}", a.shape()));
    }
    if b.shape() != [m, k] {
        return dim_err(format!("B must have shape [{m}, {k}], got {:?}", b.shape()));
    }
    if delta.data().iter().any(|&d| d < T::zero()) {
        return Err(Error::Argument("delta must be non-negative".into()));
    }
    if mode == DiscretizeMode::Exact && a.data().iter().any(|&v| v > T::zero()) {
        warn!("discretize_zoh: positive A entries make the continuous system unstable");
    }
    let mut a_bar = Vec::with_capacity(m * k * e);
    let mut b_bar = Vec::with_capacity(m * k * e);
    for (mk, drow) in delta.data().chunks_exact(e).enumerate() {
        let bv = b.data()[mk];
        for (&d, &av) in drow.iter().zip(a.data()) {
            let z = d * av;
            a_bar.push(z.exp());
            b_bar.push(match mode {
                DiscretizeMode::Euler => d * bv,
                DiscretizeMode::Exact => expm1_over(z) * d * bv,
            });
        }
    }
    Ok((
        Tensor::from_raw(vec![m, k, e], a_bar),
        Tensor::from_raw(vec![m, k, e], b_bar),
    ))
}

/// Inputs of one scan.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanInputs<T = f64> {
    /// Discrete transition, M×K×E.
    pub a_bar: Tensor<T>,
    /// Discrete input matrix (already timescale-scaled), M×K×E.
    pub b_bar: Tensor<T>,
    /// Readout, M×K.
    pub c: Tensor<T>,
    /// System inputs, M×E.
    pub x: Tensor<T>,
    /// Initial states, K×E.
    pub h0: Tensor<T>,
}

impl<T: Real> ScanInputs<T> {
    /// Checks shapes and returns `(M, K, E)`.
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        let (m, k, e) = self.a_bar.dims3()?;
        let check = |name: &str, t: &Tensor<T>, want: &[usize]| {
            if t.shape() == want {
                Ok(())
            } else {
                dim_err(format!("{name} has shape {:?}, expected {want:?}", t.shape()))
            }
        };
        check("b_bar", &self.b_bar, &[m, k, e])?;
        check("c", &self.c, &[m, k])?;
        check("x", &self.x, &[m, e])?;
        check("h0", &self.h0, &[k, e])?;
        Ok((m, k, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanOutputs<T = f64> {
    /// Per-step outputs, M×E.
    pub y: Tensor<T>,
    /// States after the last step, K×E.
    pub h_final: Tensor<T>,
    /// Every intermediate state, M×K×E, when requested.
    pub h_trace: Option<Tensor<T>>,
}

/// Advances `h` through steps `range`, writing outputs into `y` (rows of
/// the range, in order) and optionally the states into `trace`.
fn run_steps<T: Real>(
    inp: &ScanInputs<T>,
    dims: (usize, usize, usize),
    range: std::ops::Range<usize>,
    h: &mut [T],
    y: &mut [T],
    mut trace: Option<&mut [T]>,
) {
    let (_, k, e) = dims;
    let ke = k * e;
    let (ad, bd, cd, xd) = (inp.a_bar.data(), inp.b_bar.data(), inp.c.data(), inp.x.data());
    for (local, t) in range.enumerate() {
        let a = &ad[t * ke..(t + 1) * ke];
        let b = &bd[t * ke..(t + 1) * ke];
        let x = &xd[t * e..(t + 1) * e];
        let c = &cd[t * k..(t + 1) * k];
        let yt = &mut y[local * e..(local + 1) * e];
        yt.fill(T::zero());
        for s in 0..k {
            let hs = &mut h[s * e..(s + 1) * e];
            let (as_, bs) = (&a[s * e..(s + 1) * e], &b[s * e..(s + 1) * e]);
            let cs = c[s];
            for j in 0..e {
                let v = as_[j] * hs[j] + bs[j] * x[j];
                hs[j] = v;
                yt[j] = yt[j] + cs * v;
            }
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr[local * ke..(local + 1) * ke].copy_from_slice(h);
        }
    }
}

fn scan_impl<T: Real>(inp: &ScanInputs<T>, keep_trace: bool) -> Result<ScanOutputs<T>> {
    let dims = inp.dims()?;
    let (m, k, e) = dims;
    let mut h = inp.h0.data().to_vec();
    let mut y = vec![T::zero(); m * e];
    let mut trace = keep_trace.then(|| vec![T::zero(); m * k * e]);
    run_steps(inp, dims, 0..m, &mut h, &mut y, trace.as_deref_mut());
    Ok(ScanOutputs {
        y: Tensor::from_raw(vec![m, e], y),
        h_final: Tensor::from_raw(vec![k, e], h),
        h_trace: trace.map(|t| Tensor::from_raw(vec![m, k, e], t)),
    })
}

/// Reference left-to-right scan.
pub fn scan_sequential<T: Real>(inp: &ScanInputs<T>) -> Result<ScanOutputs<T>> {
    scan_impl(inp, false)
}

/// As [`scan_sequential`], also retaining every intermediate state.
pub fn scan_sequential_traced<T: Real>(inp: &ScanInputs<T>) -> Result<ScanOutputs<T>> {
    scan_impl(inp, true)
}

/// Chunked scan.
///
/// 1. Each chunk reduces its steps to one affine map `h ↦ A⊙h + B` (parallel).
/// 2. Chunk start states follow by composing those maps in chunk order.
/// 3. Each chunk replays its steps from its start state to emit outputs (parallel).
///
/// Every chunk's arithmetic has a fixed order, so results do not depend on
/// the worker count. With a single chunk this is the sequential scan exactly.
pub fn scan_chunked<T: Real>(inp: &ScanInputs<T>, chunk: usize) -> Result<ScanOutputs<T>> {
    scan_chunked_impl(inp, chunk, false)
}

pub fn scan_chunked_traced<T: Real>(inp: &ScanInputs<T>, chunk: usize) -> Result<ScanOutputs<T>> {
    scan_chunked_impl(inp, chunk, true)
}

/// Per chunk: outputs, final state, optional state trace.
type ChunkOut<T> = (Vec<T>, Vec<T>, Option<Vec<T>>);

fn scan_chunked_impl<T: Real>(
    inp: &ScanInputs<T>,
    chunk: usize,
    keep_trace: bool,
) -> Result<ScanOutputs<T>> {
    if chunk == 0 {
        return Err(Error::Argument("chunk size must be >= 1".into()));
    }
    let dims = inp.dims()?;
    let (m, k, e) = dims;
    let ke = k * e;
    let ranges: Vec<_> = (0..m).step_by(chunk).map(|s| s..(s + chunk).min(m)).collect();

    let maps: Vec<(Vec<T>, Vec<T>)> = ranges
        .par_iter()
        .map(|r| {
            let mut am = vec![T::one(); ke];
            let mut bm = vec![T::zero(); ke];
            for t in r.clone() {
                let a = &inp.a_bar.data()[t * ke..(t + 1) * ke];
                let b = &inp.b_bar.data()[t * ke..(t + 1) * ke];
                let x = &inp.x.data()[t * e..(t + 1) * e];
                for i in 0..ke {
                    am[i] = a[i] * am[i];
                    bm[i] = a[i] * bm[i] + b[i] * x[i % e];
                }
            }
            (am, bm)
        })
        .collect();

    let mut starts = Vec::with_capacity(ranges.len());
    let mut h = inp.h0.data().to_vec();
    for (am, bm) in &maps {
        starts.push(h.clone());
        for i in 0..ke {
            h[i] = am[i] * h[i] + bm[i];
        }
    }

    let pieces: Vec<ChunkOut<T>> = ranges
        .par_iter()
        .zip(starts)
        .map(|(r, mut hs)| {
            let mut y = vec![T::zero(); r.len() * e];
            let mut tr = keep_trace.then(|| vec![T::zero(); r.len() * ke]);
            run_steps(inp, dims, r.clone(), &mut hs, &mut y, tr.as_deref_mut());
            (y, hs, tr)
        })
        .collect();

    let mut y = Vec::with_capacity(m * e);
    let mut trace = keep_trace.then(|| Vec::with_capacity(m * ke));
    let mut h_final = inp.h0.data().to_vec();
    for (py, ph, pt) in pieces {
        y.extend_from_slice(&py);
        if let (Some(all), Some(pt)) = (trace.as_mut(), pt) {
            all.extend_from_slice(&pt);
        }
        h_final = ph;
    }
    Ok(ScanOutputs {
        y: Tensor::from_raw(vec![m, e], y),
        h_final: Tensor::from_raw(vec![k, e], h_final),
        h_trace: trace.map(|t| Tensor::from_raw(vec![m, k, e], t)),
    })
}

/// Time-invariant scan as a causal convolution with the kernel
/// `K̄_j[e] = Σ_k c0[k]·a_bar_0[k, e]^j·b_bar_0[k, e]`, starting from zero state.
pub fn lti_conv_form<T: Real>(
    a_bar_0: &Tensor<T>,
    b_bar_0: &Tensor<T>,
    c0: &Tensor<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (k, e) = a_bar_0.dims2()?;
    let (m, ex) = x.dims2()?;
    if b_bar_0.shape() != [k, e] || c0.shape() != [k] || ex != e {
        return dim_err("lti_conv_form: inconsistent K/E shapes");
    }
    let mut kernel = vec![T::zero(); m * e];
    let mut pw = b_bar_0.data().to_vec();
    for j in 0..m {
        for s in 0..k {
            let cs = c0.data()[s];
            for c in 0..e {
                kernel[j * e + c] = kernel[j * e + c] + cs * pw[s * e + c];
            }
        }
        for (p, &a) in pw.iter_mut().zip(a_bar_0.data()) {
            *p = *p * a;
        }
    }
    let xd = x.data();
    let mut y = vec![T::zero(); m * e];
    for t in 0..m {
        for j in 0..=t {
            for c in 0..e {
                y[t * e + c] = y[t * e + c] + kernel[j * e + c] * xd[(t - j) * e + c];
            }
        }
    }
    Ok(Tensor::from_raw(vec![m, e], y))
}

/// Gradients of a scalar loss w.r.t. every scan input.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanGrads<T = f64> {
    pub a_bar: Tensor<T>,
    pub b_bar: Tensor<T>,
    pub c: Tensor<T>,
    pub x: Tensor<T>,
    pub h0: Tensor<T>,
}

/// Reverse-mode derivatives of `(y, h_final)` given their cotangents.
///
/// Uses `forward.h_trace` when present; otherwise the forward scan is rerun
/// with tracing.
pub fn scan_backward<T: Real>(
    inp: &ScanInputs<T>,
    forward: Option<&ScanOutputs<T>>,
    dy: &Tensor<T>,
    dh_final: &Tensor<T>,
) -> Result<ScanGrads<T>> {
    let (m, k, e) = inp.dims()?;
    if dy.shape() != [m, e] || dh_final.shape() != [k, e] {
        return dim_err("cotangents must be shaped like (y, h_final)");
    }
    let recomputed;
    let trace = match forward.and_then(|f| f.h_trace.as_ref()) {
        Some(t) if t.shape() == [m, k, e] => t,
        _ => {
            recomputed = scan_sequential_traced(inp)?;
            recomputed.h_trace.as_ref().expect("traced scan")
        }
    };
    let ke = k * e;
    let (ad, bd, cd, xd) = (inp.a_bar.data(), inp.b_bar.data(), inp.c.data(), inp.x.data());
    let hs = trace.data();
    let mut g = dh_final.data().to_vec();
    let mut da = vec![T::zero(); m * ke];
    let mut db = vec![T::zero(); m * ke];
    let mut dc = vec![T::zero(); m * k];
    let mut dx = vec![T::zero(); m * e];
    for t in (0..m).rev() {
        let dyt = &dy.data()[t * e..(t + 1) * e];
        let ht = &hs[t * ke..(t + 1) * ke];
        let hprev = if t == 0 { inp.h0.data() } else { &hs[(t - 1) * ke..t * ke] };
        for s in 0..k {
            let cs = cd[t * k + s];
            let mut dcs = T::zero();
            for j in 0..e {
                let i = s * e + j;
                dcs = dcs + dyt[j] * ht[i];
                g[i] = g[i] + cs * dyt[j];
                da[t * ke + i] = g[i] * hprev[i];
                db[t * ke + i] = g[i] * xd[t * e + j];
                dx[t * e + j] = dx[t * e + j] + g[i] * bd[t * ke + i];
                g[i] = g[i] * ad[t * ke + i];
            }
            dc[t * k + s] = dcs;
        }
    }
    Ok(ScanGrads {
        a_bar: Tensor::from_raw(vec![m, k, e], da),
        b_bar: Tensor::from_raw(vec![m, k, e], db),
        c: Tensor::from_raw(vec![m, k], dc),
        x: Tensor::from_raw(vec![m, e], dx),
        h0: Tensor::from_raw(vec![k, e], g),
    })
}

/// Central differences `(f(x + s·e_i) − f(x − s·e_i)) / 2s` per coordinate.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Tensor) -> f64,
    x: &Tensor,
    step: f64,
) -> Result<Tensor> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Argument("finite-difference step must be positive".into()));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * step));
    }
    Ok(Tensor::from_raw(x.shape().to_vec(), grad))
}
