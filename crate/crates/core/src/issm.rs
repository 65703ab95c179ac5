//! The interactive scan: scene points drive a selective SSM whose states are
//! the object queries, with scan parameters conditioned on each query's box.
//!
//! Per direction the scan parameters are
//!
//! ```text
//! B[m, k] = Lin^{B,o}(x̂_o[m]) + Lin^{B,s}(S[m, k])
//! C[m, k] = Lin^{C,o}(x̂_o[m]) + Lin^{C,s}(S[m, k])
//! Δ[m, k] = softplus(Lin^{Δ,o}(x̂_o[m]) + Lin^{Δ,s}(S[m, k])) ⊙ delay[m, k]
//! ```
//!
//! where `S` encodes where point `m` sits relative to box `k` and `delay`
//! fades out points beyond the box's circumscribed sphere.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::geometry::{point_at, relative_offsets, Box3D, Vec3};
use crate::numerics::{
    depthwise_conv1d, join_name, linear, prng_fill, relu, silu, softplus, ConvDirection,
    Distribution, LinearWeights, NormWeights, ParamVisitor, Parameters, PrngStream, Tensor,
};
use crate::ssm::{discretize_zoh, scan_sequential, DiscretizeMode, ScanInputs};

/// Cells per axis of the correlation table.
pub const TABLE_SIZE: usize = 10;
pub const DEFAULT_TABLE_EXTENT: f64 = 2.0;

/// Learnable `10×10×10×D` feature grid indexed by box-local coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationTable {
    grid: Tensor,
    extent: f64,
}

impl CorrelationTable {
    pub fn new(grid: Tensor, extent: f64) -> Result<Self> {
        let (a, b, c, d) = grid.dims4()?;
        if (a, b, c) != (TABLE_SIZE, TABLE_SIZE, TABLE_SIZE) || d == 0 {
            return dim_err(format!("table grid must be 10×10×10×D, got {:?}", grid.shape()));
        }
        if !(extent > 0.0 && extent.is_finite()) {
            return Err(Error::Config(format!("table extent must be positive, got {extent}")));
        }
        grid.check_finite("table grid")?;
        Ok(CorrelationTable { grid, extent })
    }

    /// Standard-normal grid.
    pub fn init(rng: &mut PrngStream, d: usize, extent: f64) -> Result<Self> {
        let grid = prng_fill(
            rng,
            &[TABLE_SIZE, TABLE_SIZE, TABLE_SIZE, d],
            Distribution::Normal { mean: 0.0, std: 1.0 },
        )?;
        Self::new(grid, extent)
    }

    pub fn grid(&self) -> &Tensor {
        &self.grid
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn dim(&self) -> usize {
        self.grid.last_dim()
    }

    /// Trilinear sample at box-local `u`, clamped to `±extent` per axis.
    ///
    /// `−extent` maps to lattice node 0 and `+extent` to node 9.
    pub fn sample(&self, u: Vec3, out: &mut [f64]) {
        let d = self.dim();
        let top = (TABLE_SIZE - 1) as f64;
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let c = u[a].clamp(-self.extent, self.extent);
            let g = (c + self.extent) / (2.0 * self.extent) * top;
            let i0 = (g.floor() as usize).min(TABLE_SIZE - 2);
            base[a] = i0;
            frac[a] = g - i0 as f64;
        }
        out.fill(0.0);
        let grid = self.grid.data();
        for corner in 0..8 {
            let mut w = 1.0;
            let mut idx = 0;
            for a in 0..3 {
                let hi = (corner >> (2 - a)) & 1;
                w *= if hi == 1 { frac[a] } else { 1.0 - frac[a] };
                idx = idx * TABLE_SIZE + base[a] + hi;
            }
            if w == 0.0 {
                continue;
            }
            for (o, &g) in out.iter_mut().zip(&grid[idx * d..(idx + 1) * d]) {
                *o += w * g;
            }
        }
    }
}

impl Parameters for CorrelationTable {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        v.tensor(&join_name(prefix, "grid"), &mut self.grid);
    }
}

/// One-hidden-layer MLP `3 → H → D` applied to each vertex offset.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMlp {
    pub hidden: LinearWeights,
    pub out: LinearWeights,
}

impl CorrelationMlp {
    pub fn init(rng: &mut PrngStream, hidden: usize, d: usize) -> Self {
        CorrelationMlp {
            hidden: LinearWeights::init(rng, 3, hidden, true),
            out: LinearWeights::init(rng, hidden, d, true),
        }
    }

    pub fn dim(&self) -> usize {
        self.out.out_dim()
    }

    fn check(&self) -> Result<()> {
        if self.hidden.in_dim() != 3 || self.out.in_dim() != self.hidden.out_dim() {
            return dim_err("correlation MLP must map 3 → H → D");
        }
        Ok(())
    }
}

impl Parameters for CorrelationMlp {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        self.hidden.visit(&join_name(prefix, "hidden"), v);
        self.out.visit(&join_name(prefix, "out"), v);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationMode {
    #[default]
    Table,
    Mlp,
}

/// How scene-to-box geometry becomes the correlation feature `S`.
#[derive(Clone, Debug, PartialEq)]
pub enum SpatialEncoder {
    /// Grid sample at the point's box-local coordinates.
    Table(CorrelationTable),
    /// Sum of the MLP over the offsets to all eight box vertices.
    Mlp(CorrelationMlp),
}

impl SpatialEncoder {
    pub fn dim(&self) -> usize {
        match self {
            SpatialEncoder::Table(t) => t.dim(),
            SpatialEncoder::Mlp(m) => m.dim(),
        }
    }

    pub fn mode(&self) -> CorrelationMode {
        match self {
            SpatialEncoder::Table(_) => CorrelationMode::Table,
            SpatialEncoder::Mlp(_) => CorrelationMode::Mlp,
        }
    }
}

impl Parameters for SpatialEncoder {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        match self {
            SpatialEncoder::Table(t) => t.visit(&join_name(prefix, "table"), v),
            SpatialEncoder::Mlp(m) => m.visit(&join_name(prefix, "mlp"), v),
        }
    }
}

fn check_points(points: &Tensor) -> Result<usize> {
    let (m, three) = points.dims2()?;
    if three != 3 {
        return dim_err(format!("points must be M×3, got {:?}", points.shape()));
    }
    Ok(m)
}

/// Spatial correlation `S`: M×K×D.
pub fn spatial_correlation(
    points: &Tensor,
    boxes: &[Box3D],
    encoder: &SpatialEncoder,
) -> Result<Tensor> {
    let m = check_points(points)?;
    let k = boxes.len();
    let d = encoder.dim();
    if let Some(b) = boxes.iter().find(|b| !b.is_valid()) {
        return Err(Error::Argument(format!("degenerate box {b:?}")));
    }
    let mut s = vec![0.0; m * k * d];
    match encoder {
        SpatialEncoder::Table(table) => {
            for i in 0..m {
                let p = point_at(points, i);
                for (j, b) in boxes.iter().enumerate() {
                    let at = (i * k + j) * d;
                    table.sample(b.to_local(p), &mut s[at..at + d]);
                }
            }
        }
        SpatialEncoder::Mlp(mlp) => {
            mlp.check()?;
            for (j, b) in boxes.iter().enumerate() {
                let offsets = relative_offsets(points, b)?.reshape(&[m * 8, 3])?;
                let hidden = linear(&offsets, &mlp.hidden)?.map(relu);
                let feats = linear(&hidden, &mlp.out)?;
                for i in 0..m {
                    let at = (i * k + j) * d;
                    for v in 0..8 {
                        for (o, &f) in s[at..at + d].iter_mut().zip(feats.row(i * 8 + v)) {
                            *o += f;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![m, k, d], s))
}

/// Distance that the delay kernel compares with the circumscribed radius.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DelayMetric {
    /// Euclidean distance to the box center.
    #[default]
    Center,
    /// Distance to the nearest box vertex.
    Vertex,
    /// Distance to the box surface (zero inside).
    Surface,
}

impl DelayMetric {
    pub fn distance(self, b: &Box3D, p: Vec3) -> f64 {
        match self {
            DelayMetric::Center => {
                let c = b.center();
                crate::geometry::norm3([p[0] - c[0], p[1] - c[1], p[2] - c[2]])
            }
            DelayMetric::Vertex => b.distance_to_nearest_vertex(p),
            DelayMetric::Surface => b.distance_to_surface(p),
        }
    }
}

/// Delay factors `exp(α·min(R_k − d(p_m, box_k), 0))`, M×K, with `α = softplus(alpha_raw)`.
pub fn delay_kernel(
    boxes: &[Box3D],
    points: &Tensor,
    alpha_raw: f64,
    metric: DelayMetric,
) -> Result<Tensor> {
    let m = check_points(points)?;
    let k = boxes.len();
    let alpha = softplus(alpha_raw);
    let mut out = Vec::with_capacity(m * k);
    for i in 0..m {
        let p = point_at(points, i);
        for b in boxes {
            let gap = (b.circumscribed_radius() - metric.distance(b, p)).min(0.0);
            out.push((alpha * gap).exp());
        }
    }
    Ok(Tensor::from_raw(vec![m, k], out))
}

/// Weights of one scan direction.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionWeights {
    /// Depthwise kernel, E×kernel_size.
    pub conv: Tensor,
    pub b_x: LinearWeights,
    pub c_x: LinearWeights,
    pub delta_x: LinearWeights,
    pub b_s: LinearWeights,
    pub c_s: LinearWeights,
    pub delta_s: LinearWeights,
    /// Continuous transition, one entry per channel.
    pub a: Tensor,
}

impl DirectionWeights {
    pub fn init(rng: &mut PrngStream, e: usize, d: usize, kernel_size: usize) -> Self {
        let bound = 1.0 / (kernel_size as f64).sqrt();
        DirectionWeights {
            conv: prng_fill(
                rng,
                &[e, kernel_size],
                Distribution::Uniform { low: -bound, high: bound },
            )
            .expect("valid bound"),
            b_x: LinearWeights::init(rng, e, 1, true),
            c_x: LinearWeights::init(rng, e, 1, true),
            delta_x: LinearWeights::init(rng, e, e, true),
            b_s: LinearWeights::init(rng, d, 1, false),
            c_s: LinearWeights::init(rng, d, 1, false),
            delta_s: LinearWeights::init(rng, d, e, false),
            a: Tensor::full(&[e], -1.0),
        }
    }

    fn check(&self, e: usize, d: usize) -> Result<()> {
        let (ce, ks) = self.conv.dims2()?;
        let ok = ce == e
            && ks >= 1
            && self.a.shape() == [e]
            && [(&self.b_x, e, 1), (&self.c_x, e, 1), (&self.delta_x, e, e)]
                .iter()
                .chain(&[(&self.b_s, d, 1), (&self.c_s, d, 1), (&self.delta_s, d, e)])
                .all(|(l, i, o)| l.in_dim() == *i && l.out_dim() == *o);
        if ok {
            Ok(())
        } else {
            dim_err(format!("direction weights inconsistent with E={e}, D={d}"))
        }
    }
}

impl Parameters for DirectionWeights {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        v.tensor(&join_name(prefix, "conv"), &mut self.conv);
        self.b_x.visit(&join_name(prefix, "b_x"), v);
        self.c_x.visit(&join_name(prefix, "c_x"), v);
        self.delta_x.visit(&join_name(prefix, "delta_x"), v);
        self.b_s.visit(&join_name(prefix, "b_s"), v);
        self.c_s.visit(&join_name(prefix, "c_s"), v);
        self.delta_s.visit(&join_name(prefix, "delta_s"), v);
        v.tensor(&join_name(prefix, "a"), &mut self.a);
    }
}

/// Weights of the bidirectional scan module.
#[derive(Clone, Debug, PartialEq)]
pub struct IbsWeights {
    pub norm_x: NormWeights,
    pub norm_h: NormWeights,
    /// C → E.
    pub lin_x: LinearWeights,
    /// C → E, the output gate.
    pub lin_z: LinearWeights,
    /// C → E, states into the scan width.
    pub lin_h_in: LinearWeights,
    /// E → C, states back to the model width.
    pub lin_h_out: LinearWeights,
    /// E → C.
    pub lin_y: LinearWeights,
    pub forward: DirectionWeights,
    pub backward: DirectionWeights,
    /// Delay-kernel sharpness before softplus.
    pub alpha_raw: f64,
}

impl IbsWeights {
    pub fn init(rng: &mut PrngStream, c: usize, e: usize, d: usize, kernel_size: usize) -> Self {
        IbsWeights {
            norm_x: NormWeights::identity(c),
            norm_h: NormWeights::identity(c),
            lin_x: LinearWeights::init(rng, c, e, true),
            lin_z: LinearWeights::init(rng, c, e, true),
            lin_h_in: LinearWeights::init(rng, c, e, true),
            lin_h_out: LinearWeights::init(rng, e, c, true),
            lin_y: LinearWeights::init(rng, e, c, true),
            forward: DirectionWeights::init(rng, e, d, kernel_size),
            backward: DirectionWeights::init(rng, e, d, kernel_size),
            alpha_raw: 0.0,
        }
    }

    /// `(C, E, D)` after checking that every component agrees.
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        let c = self.lin_x.in_dim();
        let e = self.lin_x.out_dim();
        let d = self.forward.b_s.in_dim();
        let shapes_ok = self.norm_x.gamma.shape() == [c]
            && self.norm_h.gamma.shape() == [c]
            && [&self.lin_z, &self.lin_h_in]
                .iter()
                .all(|l| l.in_dim() == c && l.out_dim() == e)
            && [&self.lin_h_out, &self.lin_y]
                .iter()
                .all(|l| l.in_dim() == e && l.out_dim() == c);
        if !shapes_ok {
            return dim_err(format!("scan module weights inconsistent with C={c}, E={e}"));
        }
        self.forward.check(e, d)?;
        self.backward.check(e, d)?;
        if !self.alpha_raw.is_finite() {
            return Err(Error::NonFinite("alpha_raw".into()));
        }
        Ok((c, e, d))
    }

    /// Zeros both output projections, leaving only the residual paths.
    pub fn zero_residual_branches(&mut self) {
        self.lin_y.zero_out();
        self.lin_h_out.zero_out();
    }

    pub fn swap_directions(&mut self) {
        std::mem::swap(&mut self.forward, &mut self.backward);
    }
}

impl Parameters for IbsWeights {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        self.norm_x.visit(&join_name(prefix, "norm_x"), v);
        self.norm_h.visit(&join_name(prefix, "norm_h"), v);
        self.lin_x.visit(&join_name(prefix, "lin_x"), v);
        self.lin_z.visit(&join_name(prefix, "lin_z"), v);
        self.lin_h_in.visit(&join_name(prefix, "lin_h_in"), v);
        self.lin_h_out.visit(&join_name(prefix, "lin_h_out"), v);
        self.lin_y.visit(&join_name(prefix, "lin_y"), v);
        self.forward.visit(&join_name(prefix, "forward"), v);
        self.backward.visit(&join_name(prefix, "backward"), v);
        v.scalar(&join_name(prefix, "alpha_raw"), &mut self.alpha_raw);
    }
}

/// Scan parameters before softplus and the delay kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct RawParams {
    /// M×K×E.
    pub delta_logits: Tensor,
    /// M×K.
    pub b: Tensor,
    /// M×K.
    pub c: Tensor,
}

/// Combines the input term (broadcast over states) with the geometry term.
pub fn gen_params(s: &Tensor, x_feats: &Tensor, w: &DirectionWeights) -> Result<RawParams> {
    let (m, k, d) = s.dims3()?;
    let (mx, e) = x_feats.dims2()?;
    if mx != m {
        return dim_err(format!("{mx} feature rows for {m} correlation rows"));
    }
    w.check(e, d)?;
    let bx = linear(x_feats, &w.b_x)?;
    let cx = linear(x_feats, &w.c_x)?;
    let dx = linear(x_feats, &w.delta_x)?;
    let bs = linear(s, &w.b_s)?;
    let cs = linear(s, &w.c_s)?;
    let ds = linear(s, &w.delta_s)?;
    let b = Tensor::from_fn(&[m, k], |i| bx.data()[i / k] + bs.data()[i]);
    let c = Tensor::from_fn(&[m, k], |i| cx.data()[i / k] + cs.data()[i]);
    let delta_logits =
        Tensor::from_fn(&[m, k, e], |i| dx.data()[(i / (k * e)) * e + i % e] + ds.data()[i]);
    Ok(RawParams { delta_logits, b, c })
}

/// Inputs to one pass of the bidirectional scan module.
#[derive(Clone, Copy, Debug)]
pub struct IbsInputs<'a> {
    /// Scene features in scan order, M×C.
    pub x: &'a Tensor,
    /// State features, K×C.
    pub h0: &'a Tensor,
    /// Scene positions in the same order as `x`, M×3.
    pub points: &'a Tensor,
    /// One predicted box per state.
    pub boxes: &'a [Box3D],
}

/// Intermediates of one direction, all indexed in the original sequence order.
#[derive(Clone, Debug)]
pub struct DirectionTrace {
    /// SiLU(conv(x̂)), M×E.
    pub x_o: Tensor,
    /// M×K.
    pub b: Tensor,
    /// M×K.
    pub c: Tensor,
    /// M×K×E, after softplus and the delay kernel.
    pub delta: Tensor,
    /// M×K×E.
    pub a_bar: Tensor,
    /// M×K×E.
    pub b_bar: Tensor,
    /// M×E.
    pub y_hat: Tensor,
    /// Final states, K×E.
    pub h_n: Tensor,
}

#[derive(Clone, Debug)]
pub struct IbsTrace {
    /// Normalized scene features, M×C.
    pub x_norm: Tensor,
    /// Normalized states, K×C.
    pub h_norm: Tensor,
    /// M×E.
    pub x_hat: Tensor,
    /// M×E.
    pub z: Tensor,
    /// K×E.
    pub h0_hat: Tensor,
    /// M×K×D.
    pub s: Tensor,
    /// M×K.
    pub delay: Tensor,
    pub forward: DirectionTrace,
    pub backward: DirectionTrace,
    /// M×C.
    pub y: Tensor,
    /// K×C.
    pub h_out: Tensor,
}

struct Shared<'a> {
    x_hat: &'a Tensor,
    s: &'a Tensor,
    delay: &'a Tensor,
    h0_hat: &'a Tensor,
}

fn run_direction(sh: &Shared, w: &DirectionWeights, reverse: bool) -> Result<DirectionTrace> {
    let flip = |t: &Tensor| if reverse { t.reverse_outer() } else { t.clone() };
    let x_hat = flip(sh.x_hat);
    let s = flip(sh.s);
    let delay = flip(sh.delay);
    let (m, k, _) = s.dims3()?;
    let x_o = depthwise_conv1d(&x_hat, &w.conv, ConvDirection::Forward)?.map(silu);
    let raw = gen_params(&s, &x_o, w)?;
    let e = x_o.last_dim();
    let delta = Tensor::from_fn(&[m, k, e], |i| {
        softplus(raw.delta_logits.data()[i]) * delay.data()[i / e]
    });
    let (a_bar, b_bar) = discretize_zoh(&delta, &w.a, &raw.b, DiscretizeMode::Euler)?;
    let inputs = ScanInputs {
        a_bar,
        b_bar,
        c: raw.c,
        x: x_o,
        h0: sh.h0_hat.clone(),
    };
    let out = scan_sequential(&inputs)?;
    Ok(DirectionTrace {
        x_o: flip(&inputs.x),
        b: flip(&raw.b),
        c: flip(&inputs.c),
        delta: flip(&delta),
        a_bar: flip(&inputs.a_bar),
        b_bar: flip(&inputs.b_bar),
        y_hat: flip(&out.y),
        h_n: out.h_final,
    })
}

/// Runs the module and keeps every intermediate.
pub fn ibs_forward_traced(
    inp: &IbsInputs,
    w: &IbsWeights,
    encoder: &SpatialEncoder,
    metric: DelayMetric,
) -> Result<IbsTrace> {
    let (c, _, d) = w.dims()?;
    let (m, cx) = inp.x.dims2()?;
    let (k, ch) = inp.h0.dims2()?;
    if m == 0 {
        return dim_err("scan over an empty scene sequence");
    }
    if k == 0 {
        return dim_err("scan with no states");
    }
    if cx != c || ch != c {
        return dim_err(format!("features have widths {cx}/{ch}, weights expect {c}"));
    }
    if check_points(inp.points)? != m {
        return dim_err("points and features disagree on M");
    }
    if inp.boxes.len() != k {
        return dim_err(format!("{} boxes for {k} states", inp.boxes.len()));
    }
    if encoder.dim() != d {
        return dim_err(format!("correlation width {} but weights expect {d}", encoder.dim()));
    }

    let x_norm = w.norm_x.apply(inp.x)?;
    let h_norm = w.norm_h.apply(inp.h0)?;
    let x_hat = linear(&x_norm, &w.lin_x)?;
    let z = linear(&x_norm, &w.lin_z)?;
    let h0_hat = linear(&h_norm, &w.lin_h_in)?;
    let s = spatial_correlation(inp.points, inp.boxes, encoder)?;
    let delay = delay_kernel(inp.boxes, inp.points, w.alpha_raw, metric)?;

    let shared = Shared {
        x_hat: &x_hat,
        s: &s,
        delay: &delay,
        h0_hat: &h0_hat,
    };
    let (fwd, bwd) = rayon::join(
        || run_direction(&shared, &w.forward, false),
        || run_direction(&shared, &w.backward, true),
    );
    let (fwd, bwd) = (fwd?, bwd?);

    let gate = z.map(silu);
    let fused = fwd.y_hat.mul(&gate)?.add(&bwd.y_hat.mul(&gate)?)?;
    let y = linear(&fused, &w.lin_y)?.add(inp.x)?;
    let h_out = linear(&fwd.h_n.add(&bwd.h_n)?, &w.lin_h_out)?.add(inp.h0)?;
    Ok(IbsTrace {
        x_norm,
        h_norm,
        x_hat,
        z,
        h0_hat,
        s,
        delay,
        forward: fwd,
        backward: bwd,
        y,
        h_out,
    })
}

/// Bidirectional scan module: returns updated scene features `y` (M×C) and
/// states `h_out` (K×C).
pub fn ibs_forward(
    inp: &IbsInputs,
    w: &IbsWeights,
    encoder: &SpatialEncoder,
    metric: DelayMetric,
) -> Result<(Tensor, Tensor)> {
    let t = ibs_forward_traced(inp, w, encoder, metric)?;
    Ok((t.y, t.h_out))
}
