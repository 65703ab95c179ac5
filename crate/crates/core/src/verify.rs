//! Executable checks of the model's mathematical claims.
//!
//! - Cross-attention from fixed queries over a growing key prefix equals a
//!   first-order linear recurrence, i.e. an SSM with time-varying scalars.
//! - The time-invariant scan equals its convolution form; the chunked scan
//!   equals the sequential one; the analytic backward pass matches finite
//!   differences; the delay kernel behaves as specified.
//! - Scan time grows linearly in M, self-attention quadratically.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::error::{dim_err, Error, Result};
use crate::geometry::{norm3, Box3D};
use crate::issm::{
    delay_kernel, ibs_forward_traced, CorrelationTable, DelayMetric, IbsInputs, IbsWeights,
    SpatialEncoder,
};
use crate::numerics::{prng_fill, softmax_attention, softplus, Distribution, PrngStream, Tensor};
use crate::ssm::{
    finite_diff_grad, lti_conv_form, scan_backward, scan_chunked, scan_sequential,
    scan_sequential_traced, ScanInputs,
};

/// Positive similarity between a query and a key.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Similarity {
    /// `exp(scale · q·k)`.
    ExpDot { scale: f64 },
    /// `exp(−gamma · |q − k|²)`.
    Rbf { gamma: f64 },
}

impl Similarity {
    pub fn eval(&self, q: &[f64], k: &[f64]) -> f64 {
        match *self {
            Similarity::ExpDot { scale } => {
                (scale * q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>()).exp()
            }
            Similarity::Rbf { gamma } => {
                (-gamma * q.iter().zip(k).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).exp()
            }
        }
    }
}

fn check_attention(q0: &Tensor, keys: &Tensor, values: &Tensor) -> Result<(usize, usize, usize)> {
    let (k, c) = q0.dims2()?;
    let (m, ck) = keys.dims2()?;
    if ck != c || values.shape() != keys.shape() {
        return dim_err("queries, keys and values must share width C and keys/values length M");
    }
    if m == 0 {
        return dim_err("attention over zero keys");
    }
    Ok((k, m, c))
}

/// `Q_m = Σ_{j≤m} sim(q0, K_j)·V_j / Σ_{j≤m} sim(q0, K_j)`, K×C.
pub fn attention_direct(
    q0: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    m: usize,
    sim: Similarity,
) -> Result<Tensor> {
    let (k, total, c) = check_attention(q0, keys, values)?;
    if m == 0 || m > total {
        return Err(Error::Argument(format!("prefix length {m} outside 1..={total}")));
    }
    let mut out = vec![0.0; k * c];
    for i in 0..k {
        let q = q0.row(i);
        let sims: Vec<f64> = (0..m).map(|j| sim.eval(q, keys.row(j))).collect();
        let denom: f64 = sims.iter().sum();
        if !(denom > 0.0 && denom.is_finite()) {
            return Err(Error::Numerical(format!("similarity sum {denom}")));
        }
        let acc = &mut out[i * c..(i + 1) * c];
        for (j, s) in sims.iter().enumerate() {
            let w = s / denom;
            for (a, &v) in acc.iter_mut().zip(values.row(j)) {
                *a += w * v;
            }
        }
    }
    Ok(Tensor::from_raw(vec![k, c], out))
}

/// Recurrence coefficients `A_m = S_{m−1}/S_m`, `B_m = sim(q0, K_m)/S_m`, each M×K.
pub fn recurrence_coefficients(
    q0: &Tensor,
    keys: &Tensor,
    sim: Similarity,
) -> Result<(Tensor, Tensor)> {
    let (k, c) = q0.dims2()?;
    let (m, ck) = keys.dims2()?;
    if ck != c {
        return dim_err("queries and keys must share width C");
    }
    let mut a = vec![0.0; m * k];
    let mut b = vec![0.0; m * k];
    for i in 0..k {
        let mut running = 0.0;
        for t in 0..m {
            let s = sim.eval(q0.row(i), keys.row(t));
            let next = running + s;
            if !(next > 0.0 && next.is_finite()) {
                return Err(Error::Numerical(format!("similarity sum {next}")));
            }
            a[t * k + i] = running / next;
            b[t * k + i] = s / next;
            running = next;
        }
    }
    Ok((
        Tensor::from_raw(vec![m, k], a),
        Tensor::from_raw(vec![m, k], b),
    ))
}

/// All prefixes `Q_1..Q_M` via `Q_m = A_m·Q_{m−1} + B_m·V_m`, M×K×C.
pub fn attention_recurrence(
    q0: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    sim: Similarity,
) -> Result<Tensor> {
    let (k, m, c) = check_attention(q0, keys, values)?;
    let (a, b) = recurrence_coefficients(q0, keys, sim)?;
    let mut q = vec![0.0; k * c];
    let mut out = Vec::with_capacity(m * k * c);
    for t in 0..m {
        let v = values.row(t);
        for i in 0..k {
            let (at, bt) = (a.data()[t * k + i], b.data()[t * k + i]);
            for (qc, &vc) in q[i * c..(i + 1) * c].iter_mut().zip(v) {
                *qc = at * *qc + bt * vc;
            }
        }
        out.extend_from_slice(&q);
    }
    Ok(Tensor::from_raw(vec![m, k, c], out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteKind {
    AttnRecurrence,
    ScanConv,
    ScanChunked,
    GradCheck,
    DelayMonotone,
}

impl SuiteKind {
    pub const ALL: [SuiteKind; 5] = [
        SuiteKind::AttnRecurrence,
        SuiteKind::ScanConv,
        SuiteKind::ScanChunked,
        SuiteKind::GradCheck,
        SuiteKind::DelayMonotone,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SuiteKind::AttnRecurrence => "attn_recurrence",
            SuiteKind::ScanConv => "scan_conv",
            SuiteKind::ScanChunked => "scan_chunked",
            SuiteKind::GradCheck => "grad_check",
            SuiteKind::DelayMonotone => "delay_monotone",
        }
    }

    pub fn default_tolerance(self) -> f64 {
        match self {
            SuiteKind::GradCheck => 1e-5,
            _ => 1e-12,
        }
    }
}

impl fmt::Display for SuiteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SuiteKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SuiteKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown suite '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub kind: SuiteKind,
    /// Largest error in the suite's own metric; `pass` iff this is within `tolerance`.
    pub max_abs_err: f64,
    /// Largest plain relative error `|got − want| / |want|` over nonzero references.
    pub max_rel_err: f64,
    pub cases: usize,
    pub pass: bool,
    pub tolerance: f64,
}

/// Knobs for the suites. `perturb_scan` is added to every output of the
/// reference scan, making the scan comparisons fail on purpose.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SuiteOptions {
    pub tolerance: Option<f64>,
    pub perturb_scan: f64,
}

#[derive(Default)]
struct ErrAcc {
    abs: f64,
    rel: f64,
    cases: usize,
}

impl ErrAcc {
    fn compare(&mut self, got: &[f64], want: &[f64]) {
        for (&g, &w) in got.iter().zip(want) {
            let d = (g - w).abs();
            self.abs = self.abs.max(if d.is_nan() { f64::INFINITY } else { d });
            if w != 0.0 {
                self.rel = self.rel.max(d / w.abs());
            }
        }
    }
}

fn normal(rng: &mut PrngStream, shape: &[usize]) -> Tensor {
    prng_fill(rng, shape, Distribution::Normal { mean: 0.0, std: 1.0 }).expect("valid")
}

fn uniform(rng: &mut PrngStream, shape: &[usize], low: f64, high: f64) -> Tensor {
    prng_fill(rng, shape, Distribution::Uniform { low, high }).expect("valid")
}

/// Random scan instance with stable transitions.
pub fn random_scan_inputs(rng: &mut PrngStream, m: usize, k: usize, e: usize) -> ScanInputs {
    ScanInputs {
        a_bar: uniform(rng, &[m, k, e], 0.5, 1.0),
        b_bar: uniform(rng, &[m, k, e], -1.0, 1.0),
        c: uniform(rng, &[m, k], -1.0, 1.0),
        x: uniform(rng, &[m, e], -1.0, 1.0),
        h0: uniform(rng, &[k, e], -1.0, 1.0),
    }
}

fn perturbed(t: &Tensor, eps: f64) -> Tensor {
    if eps == 0.0 {
        t.clone()
    } else {
        t.map(|v| v + eps)
    }
}

fn suite_attn(rng: &mut PrngStream, acc: &mut ErrAcc) -> Result<()> {
    let (m, k, c) = (64, 8, 8);
    let q0 = normal(rng, &[k, c]);
    let keys = normal(rng, &[m, c]);
    let values = normal(rng, &[m, c]);
    for sim in [
        Similarity::ExpDot { scale: 1.0 / (c as f64).sqrt() },
        Similarity::Rbf { gamma: 0.5 / c as f64 },
    ] {
        let rec = attention_recurrence(&q0, &keys, &values, sim)?;
        let stride = k * c;
        for p in 1..=m {
            let direct = attention_direct(&q0, &keys, &values, p, sim)?;
            acc.compare(&rec.data()[(p - 1) * stride..p * stride], direct.data());
        }
        acc.cases += 1;
    }
    Ok(())
}

fn suite_scan_conv(rng: &mut PrngStream, acc: &mut ErrAcc, eps: f64) -> Result<()> {
    let (m, k, e) = (64, 8, 8);
    let a0 = uniform(rng, &[k, e], 0.5, 0.99);
    let b0 = uniform(rng, &[k, e], -1.0, 1.0);
    let c0 = uniform(rng, &[k], -1.0, 1.0);
    let x = uniform(rng, &[m, e], -1.0, 1.0);
    let inputs = ScanInputs {
        a_bar: Tensor::from_fn(&[m, k, e], |i| a0.data()[i % (k * e)]),
        b_bar: Tensor::from_fn(&[m, k, e], |i| b0.data()[i % (k * e)]),
        c: Tensor::from_fn(&[m, k], |i| c0.data()[i % k]),
        x: x.clone(),
        h0: Tensor::zeros(&[k, e]),
    };
    let scan = perturbed(&scan_sequential(&inputs)?.y, eps);
    let conv = lti_conv_form(&a0, &b0, &c0, &x)?;
    acc.compare(conv.data(), scan.data());
    acc.cases += 1;
    Ok(())
}

fn suite_scan_chunked(rng: &mut PrngStream, acc: &mut ErrAcc, eps: f64) -> Result<()> {
    let (m, k, e) = (130, 8, 8);
    let inputs = random_scan_inputs(rng, m, k, e);
    let seq = scan_sequential(&inputs)?;
    let (y, h) = (perturbed(&seq.y, eps), perturbed(&seq.h_final, eps));
    for chunk in [1, 7, 64, m] {
        let ch = scan_chunked(&inputs, chunk)?;
        acc.compare(ch.y.data(), y.data());
        acc.compare(ch.h_final.data(), h.data());
        acc.cases += 1;
    }
    Ok(())
}

/// Error `|g − n| / max(|n|, 1e-3)`: at most 1e-5 exactly when
/// `|g − n| ≤ max(1e-5·|n|, 1e-8)`.
fn suite_grad(rng: &mut PrngStream, acc: &mut ErrAcc) -> Result<()> {
    let (m, k, e) = (6, 3, 4);
    let inputs = random_scan_inputs(rng, m, k, e);
    let dy = uniform(rng, &[m, e], -1.0, 1.0);
    let dh = uniform(rng, &[k, e], -1.0, 1.0);
    let fwd = scan_sequential_traced(&inputs)?;
    let grads = scan_backward(&inputs, Some(&fwd), &dy, &dh)?;
    let loss = |i: &ScanInputs| -> f64 {
        let o = scan_sequential(i).expect("shapes fixed");
        o.y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum::<f64>()
            + o.h_final.data().iter().zip(dh.data()).map(|(a, b)| a * b).sum::<f64>()
    };
    type Field = fn(&mut ScanInputs) -> &mut Tensor;
    let fields: [(Field, &Tensor); 5] = [
        (|i| &mut i.a_bar, &grads.a_bar),
        (|i| &mut i.b_bar, &grads.b_bar),
        (|i| &mut i.c, &grads.c),
        (|i| &mut i.x, &grads.x),
        (|i| &mut i.h0, &grads.h0),
    ];
    for (field, analytic) in fields {
        let mut probe = inputs.clone();
        let base = field(&mut probe).clone();
        let numeric = finite_diff_grad(
            |v| {
                *field(&mut probe) = v.clone();
                loss(&probe)
            },
            &base,
            1e-5,
        )?;
        for (&g, &n) in analytic.data().iter().zip(numeric.data()) {
            let d = (g - n).abs();
            acc.abs = acc.abs.max(d / n.abs().max(1e-3));
            if n != 0.0 {
                acc.rel = acc.rel.max(d / n.abs());
            }
        }
        acc.cases += 1;
    }
    Ok(())
}

fn random_box(rng: &mut PrngStream) -> Box3D {
    let c = [rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)];
    let s = [rng.uniform(0.2, 1.5), rng.uniform(0.2, 1.5), rng.uniform(0.2, 1.5)];
    Box3D::new(c, s, rng.uniform(-3.0, 3.0)).expect("positive sizes")
}

/// Each check contributes its excess over what it allows, so a clean run
/// reports only rounding error.
fn suite_delay(rng: &mut PrngStream, acc: &mut ErrAcc) -> Result<()> {
    let b = random_box(rng);
    let alpha_raw = rng.uniform(-2.0, 2.0);
    let alpha = softplus(alpha_raw);
    let r = b.circumscribed_radius();
    let dir = {
        let v = [rng.normal(0.0, 1.0), rng.normal(0.0, 1.0), rng.normal(0.0, 1.0)];
        let n = norm3(v);
        [v[0] / n, v[1] / n, v[2] / n]
    };
    let c = b.center();
    let at = |d: f64| [c[0] + dir[0] * d, c[1] + dir[1] * d, c[2] + dir[2] * d];
    let reach = r + 6.0 / alpha;
    let steps = 200;
    let mut pts = Vec::with_capacity((steps + 2) * 3);
    for i in 0..=steps {
        pts.extend_from_slice(&at(reach * i as f64 / steps as f64));
    }
    pts.extend_from_slice(&at(r + 1.0 / alpha));
    let pts = Tensor::new(vec![steps + 2, 3], pts)?;
    let f = delay_kernel(&[b], &pts, alpha_raw, DelayMetric::Center)?;
    let f = f.data();
    for i in 0..=steps {
        let d = reach * i as f64 / steps as f64;
        if d <= r {
            acc.compare(&[f[i]], &[1.0]);
        } else if i > 0 && reach * (i - 1) as f64 / steps as f64 >= r && f[i] >= f[i - 1] {
            acc.abs = f64::INFINITY;
        }
    }
    acc.compare(&[f[steps + 1]], &[(-1.0f64).exp()]);

    // A point beyond R + 10/α of every box barely moves the states.
    let (m, k, ch, e, dd) = (8, 3, 4, 8, 3);
    let mut w = IbsWeights::init(rng, ch, e, dd, 4);
    let enc = SpatialEncoder::Table(CorrelationTable::init(rng, dd, 2.0)?);
    let x = normal(rng, &[m, ch]);
    let h0 = normal(rng, &[k, ch]);
    let boxes: Vec<Box3D> = (0..k).map(|_| random_box(rng)).collect();
    let mut pts = uniform(rng, &[m, 3], -2.0, 2.0);
    w.alpha_raw = alpha_raw;
    let far = boxes
        .iter()
        .map(|b| norm3(b.center()) + b.circumscribed_radius())
        .fold(0.0, f64::max)
        + 10.0 / alpha
        + 1.0;
    let far_idx = rng.index(m);
    pts.row_mut(far_idx).copy_from_slice(&[far, far, -far]);
    let inp = IbsInputs {
        x: &x,
        h0: &h0,
        points: &pts,
        boxes: &boxes,
    };
    let on = ibs_forward_traced(&inp, &w, &enc, DelayMetric::Center)?;
    w.alpha_raw = -800.0;
    let off = ibs_forward_traced(&inp, &w, &enc, DelayMetric::Center)?;
    let update = |t: &crate::issm::DirectionTrace| -> f64 {
        let mut n = 0.0;
        for s in 0..k {
            for j in 0..e {
                n += (t.b_bar.get(&[far_idx, s, j]) * t.x_o.get(&[far_idx, j])).powi(2);
            }
        }
        n.sqrt()
    };
    for (a, b) in [(&on.forward, &off.forward), (&on.backward, &off.backward)] {
        let (u_on, u_off) = (update(a), update(b));
        if u_off > 0.0 {
            acc.abs = acc.abs.max(u_on / u_off - 1e-4).max(0.0);
        }
    }
    acc.cases += 1;
    Ok(())
}

/// Runs `kind` over seeds `0..seeds`. Failures show up in the report.
pub fn run_equivalence_suite(
    kind: SuiteKind,
    seeds: usize,
    opts: SuiteOptions,
) -> Result<EquivalenceReport> {
    if seeds == 0 {
        return Err(Error::Argument("seeds must be >= 1".into()));
    }
    let tolerance = opts.tolerance.unwrap_or(kind.default_tolerance());
    if !(tolerance >= 0.0) {
        return Err(Error::Argument(format!("tolerance must be >= 0, got {tolerance}")));
    }
    let mut acc = ErrAcc::default();
    for seed in 0..seeds as u64 {
        let mut rng = PrngStream::new(seed);
        match kind {
            SuiteKind::AttnRecurrence => suite_attn(&mut rng, &mut acc)?,
            SuiteKind::ScanConv => suite_scan_conv(&mut rng, &mut acc, opts.perturb_scan)?,
            SuiteKind::ScanChunked => suite_scan_chunked(&mut rng, &mut acc, opts.perturb_scan)?,
            SuiteKind::GradCheck => suite_grad(&mut rng, &mut acc)?,
            SuiteKind::DelayMonotone => suite_delay(&mut rng, &mut acc)?,
        }
    }
    Ok(EquivalenceReport {
        kind,
        max_abs_err: acc.abs,
        max_rel_err: acc.rel,
        cases: acc.cases,
        pass: acc.abs <= tolerance,
        tolerance,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub m: usize,
    /// Median seconds of one sequential scan.
    pub scan_time: f64,
    /// Median seconds of one M×M self-attention.
    pub attention_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub scan_slope: f64,
    pub attention_slope: f64,
}

/// Width of the benchmarked self-attention.
pub const BENCH_ATTENTION_DIM: usize = 32;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

/// Bytes overwritten before each timed sample so every size starts from a
/// cold cache instead of mixing cache-resident small sizes with
/// memory-bound large ones.
pub const BENCH_EVICT_BYTES: usize = 256 << 20;

fn evict_caches(buf: &mut [u64]) {
    for (i, v) in buf.iter_mut().enumerate() {
        *v = v.wrapping_add(i as u64);
    }
    std::hint::black_box(&buf[buf.len() / 2]);
}

fn time_median(repeats: usize, evict: &mut [u64], mut f: impl FnMut()) -> f64 {
    f();
    let samples = (0..repeats)
        .map(|_| {
            evict_caches(evict);
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .collect();
    median(samples)
}

/// Median wall time of an f32 scan (K states × E channels) and of an f32
/// M×M single-head self-attention at each M, plus the fitted log-log
/// slopes. Runs on one worker thread; each timing is preceded by an
/// untimed warm-up call, and each timed sample by a cache eviction pass.
pub fn complexity_bench(m_values: &[usize], k: usize, e: usize, repeats: usize) -> Result<BenchReport> {
    if m_values.len() < 2 || m_values.windows(2).any(|w| w[0] >= w[1]) || m_values[0] == 0 {
        return Err(Error::Argument("M values must be at least two ascending positive sizes".into()));
    }
    if repeats < 3 {
        return Err(Error::Argument("repeats must be >= 3".into()));
    }
    if k == 0 || e == 0 {
        return Err(Error::Argument("K and E must be >= 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|err| Error::Config(err.to_string()))?;
    pool.install(|| {
        let mut rows = Vec::with_capacity(m_values.len());
        let mut evict = vec![0u64; BENCH_EVICT_BYTES / 8];
        for &m in m_values {
            let mut rng = PrngStream::new(m as u64);
            let inputs: ScanInputs<f32> = {
                let s = random_scan_inputs(&mut rng, m, k, e);
                ScanInputs {
                    a_bar: s.a_bar.cast(),
                    b_bar: s.b_bar.cast(),
                    c: s.c.cast(),
                    x: s.x.cast(),
                    h0: s.h0.cast(),
                }
            };
            let scan_time = time_median(repeats, &mut evict, || {
                std::hint::black_box(scan_sequential(&inputs).expect("valid shapes"));
            });
            drop(inputs);
            let tokens: Tensor<f32> = normal(&mut rng, &[m, BENCH_ATTENTION_DIM]).cast();
            let attention_time = time_median(repeats, &mut evict, || {
                std::hint::black_box(
                    softmax_attention(&tokens, &tokens, &tokens, 1).expect("valid shapes"),
                );
            });
            rows.push(BenchRow {
                m,
                scan_time,
                attention_time,
            });
        }
        let ms: Vec<f64> = rows.iter().map(|r| r.m as f64).collect();
        let scan: Vec<f64> = rows.iter().map(|r| r.scan_time).collect();
        let attn: Vec<f64> = rows.iter().map(|r| r.attention_time).collect();
        Ok(BenchReport {
            scan_slope: loglog_slope(&ms, &scan),
            attention_slope: loglog_slope(&ms, &attn),
            rows,
        })
    })
}
