//! Decoder layers, the stack, the detection head and the objectness loss.
//!
//! One layer serializes the scene with the layer's curve, runs the
//! bidirectional scan (updating scene and state features together), mixes
//! the states with self-attention, applies a gated FFN to both streams and
//! restores the original scene order. The head then re-predicts every
//! state's box, which conditions the next layer's scan.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::geometry::{point_in_box, Box3D, Scene};
use crate::issm::{
    ibs_forward, CorrelationMlp, CorrelationMode, CorrelationTable, DelayMetric, IbsInputs,
    IbsWeights, SpatialEncoder, DEFAULT_TABLE_EXTENT,
};
use crate::numerics::{
    depthwise_conv1d, join_name, linear, relu, sigmoid, silu, softmax_attention, softplus,
    ConvDirection, LinearWeights, NormWeights, ParamVisitor, Parameters, PrngStream, Tensor,
};
use crate::serialization::{order_for_layer, serialize, Bounds, SerializationOrder, DEFAULT_BITS};

pub const DEFAULT_SIZE_FLOOR: f64 = 0.05;
pub const DEFAULT_FOCAL_GAMMA: f64 = 2.0;
pub const DEFAULT_FOCAL_ALPHA: f64 = 0.25;
/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` inside the loss.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub num_layers: usize,
    /// Model width C.
    pub hidden_dim: usize,
    /// Scan width E.
    pub scan_dim: usize,
    /// Spatial correlation width D.
    pub corr_dim: usize,
    /// GFFN expansion width.
    pub ffn_dim: usize,
    pub heads: usize,
    pub kernel_size: usize,
    /// Number of state points K.
    pub num_states: usize,
    pub bits: u32,
    pub correlation: CorrelationMode,
    pub delay_metric: DelayMetric,
    pub num_classes: usize,
    pub table_extent: f64,
    /// Hidden width of the correlation MLP in `mlp` mode.
    pub mlp_hidden: usize,
    /// Apply the GFFN to the state stream.
    pub gffn_states: bool,
    /// Depthwise convolution inside the scene-stream GFFN.
    pub gffn_dwconv: bool,
    pub size_floor: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            num_layers: 6,
            hidden_dim: 32,
            scan_dim: 32,
            corr_dim: 16,
            ffn_dim: 64,
            heads: 4,
            kernel_size: 8,
            num_states: 16,
            bits: DEFAULT_BITS,
            correlation: CorrelationMode::Table,
            delay_metric: DelayMetric::Center,
            num_classes: 10,
            table_extent: DEFAULT_TABLE_EXTENT,
            mlp_hidden: 16,
            gffn_states: true,
            gffn_dwconv: true,
            size_floor: DEFAULT_SIZE_FLOOR,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("scan_dim", self.scan_dim),
            ("corr_dim", self.corr_dim),
            ("ffn_dim", self.ffn_dim),
            ("heads", self.heads),
            ("kernel_size", self.kernel_size),
            ("num_states", self.num_states),
            ("num_classes", self.num_classes),
            ("mlp_hidden", self.mlp_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by {} heads",
                self.hidden_dim, self.heads
            )));
        }
        SerializationOrder::new(order_for_layer(0), self.bits)
            .map_err(|e| Error::Config(e.to_string()))?;
        if !(self.table_extent > 0.0 && self.table_extent.is_finite()) {
            return Err(Error::Config("table_extent must be positive".into()));
        }
        if !(self.size_floor > 0.0 && self.size_floor.is_finite()) {
            return Err(Error::Config("size_floor must be positive".into()));
        }
        Ok(())
    }
}

/// Pre-norm multi-head self-attention over the states.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub norm: NormWeights,
    pub q: LinearWeights,
    pub k: LinearWeights,
    pub v: LinearWeights,
    pub out: LinearWeights,
}

impl AttentionWeights {
    pub fn init(rng: &mut PrngStream, c: usize) -> Self {
        AttentionWeights {
            norm: NormWeights::identity(c),
            q: LinearWeights::init(rng, c, c, true),
            k: LinearWeights::init(rng, c, c, true),
            v: LinearWeights::init(rng, c, c, true),
            out: LinearWeights::init(rng, c, c, true),
        }
    }
}

impl Parameters for AttentionWeights {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        self.norm.visit(&join_name(prefix, "norm"), v);
        self.q.visit(&join_name(prefix, "q"), v);
        self.k.visit(&join_name(prefix, "k"), v);
        self.v.visit(&join_name(prefix, "v"), v);
        self.out.visit(&join_name(prefix, "out"), v);
    }
}

/// `h + Out(Attn(Norm(h)))`.
pub fn inter_state_attention(h: &Tensor, w: &AttentionWeights, heads: usize) -> Result<Tensor> {
    let n = w.norm.apply(h)?;
    let q = linear(&n, &w.q)?;
    let k = linear(&n, &w.k)?;
    let v = linear(&n, &w.v)?;
    let a = softmax_attention(&q, &k, &v, heads)?;
    h.add(&linear(&a, &w.out)?)
}

/// Gated feed-forward block.
#[derive(Clone, Debug, PartialEq)]
pub struct GffnWeights {
    pub norm: NormWeights,
    pub gate: LinearWeights,
    pub value: LinearWeights,
    pub out: LinearWeights,
    /// Depthwise kernel over the value path, `E_ff × kernel_size`.
    pub conv: Option<Tensor>,
}

impl GffnWeights {
    pub fn init(rng: &mut PrngStream, c: usize, ffn: usize, conv_size: Option<usize>) -> Self {
        GffnWeights {
            norm: NormWeights::identity(c),
            gate: LinearWeights::init(rng, c, ffn, true),
            value: LinearWeights::init(rng, c, ffn, true),
            // No bias, so a closed gate leaves the input untouched.
            out: LinearWeights::init(rng, ffn, c, false),
            conv: conv_size.map(|ks| {
                let b = 1.0 / (ks as f64).sqrt();
                crate::numerics::prng_fill(
                    rng,
                    &[ffn, ks],
                    crate::numerics::Distribution::Uniform { low: -b, high: b },
                )
                .expect("valid bound")
            }),
        }
    }
}

impl Parameters for GffnWeights {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        self.norm.visit(&join_name(prefix, "norm"), v);
        self.gate.visit(&join_name(prefix, "gate"), v);
        self.value.visit(&join_name(prefix, "value"), v);
        self.out.visit(&join_name(prefix, "out"), v);
        if let Some(c) = &mut self.conv {
            v.tensor(&join_name(prefix, "conv"), c);
        }
    }
}

/// `t + Out(SiLU(Gate(Norm t)) ⊙ V)` with `V = Val(Norm t)`, convolved along
/// the sequence when `with_dwconv` is set.
pub fn gffn(t: &Tensor, w: &GffnWeights, with_dwconv: bool) -> Result<Tensor> {
    let n = w.norm.apply(t)?;
    let gate = linear(&n, &w.gate)?.map(silu);
    let mut value = linear(&n, &w.value)?;
    if with_dwconv {
        let kernel = w
            .conv
            .as_ref()
            .ok_or_else(|| Error::Config("GFFN convolution requested without a kernel".into()))?;
        value = depthwise_conv1d(&value, kernel, ConvDirection::Forward)?;
    }
    t.add(&linear(&gate.mul(&value)?, &w.out)?)
}

/// Per-state box, class and objectness prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights {
    pub hidden: LinearWeights,
    pub offset: LinearWeights,
    pub size: LinearWeights,
    pub sin: LinearWeights,
    pub cos: LinearWeights,
    pub cls: LinearWeights,
    pub obj: LinearWeights,
}

impl HeadWeights {
    pub fn init(rng: &mut PrngStream, c: usize, num_classes: usize) -> Self {
        HeadWeights {
            hidden: LinearWeights::init(rng, c, c, true),
            offset: LinearWeights::init(rng, c, 3, true),
            size: LinearWeights::init(rng, c, 3, true),
            sin: LinearWeights::init(rng, c, 1, true),
            cos: LinearWeights::init(rng, c, 1, true),
            cls: LinearWeights::init(rng, c, num_classes, true),
            obj: LinearWeights::init(rng, c, 1, true),
        }
    }

    pub fn zeros(c: usize, num_classes: usize) -> Self {
        HeadWeights {
            hidden: LinearWeights::zeros(c, c, true),
            offset: LinearWeights::zeros(c, 3, true),
            size: LinearWeights::zeros(c, 3, true),
            sin: LinearWeights::zeros(c, 1, true),
            cos: LinearWeights::zeros(c, 1, true),
            cls: LinearWeights::zeros(c, num_classes, true),
            obj: LinearWeights::zeros(c, 1, true),
        }
    }
}

impl Parameters for HeadWeights {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        self.hidden.visit(&join_name(prefix, "hidden"), v);
        self.offset.visit(&join_name(prefix, "offset"), v);
        self.size.visit(&join_name(prefix, "size"), v);
        self.sin.visit(&join_name(prefix, "sin"), v);
        self.cos.visit(&join_name(prefix, "cos"), v);
        self.cls.visit(&join_name(prefix, "cls"), v);
        self.obj.visit(&join_name(prefix, "obj"), v);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: Box3D,
    pub class_logits: Tensor,
    pub objectness: f64,
}

impl Detection {
    /// Index of the largest logit; the first wins ties.
    pub fn class(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.class_logits.data().iter().enumerate() {
            if v > self.class_logits.data()[best] {
                best = i;
            }
        }
        best
    }
}

/// Predicts one box per state around `ref_positions`.
///
/// `yaw = atan2(sin, cos)`, so an all-zero head yields yaw 0.
pub fn detection_head(
    h: &Tensor,
    ref_positions: &Tensor,
    w: &HeadWeights,
    size_floor: f64,
) -> Result<Vec<Detection>> {
    let (k, _) = h.dims2()?;
    if ref_positions.shape() != [k, 3] {
        return dim_err(format!(
            "reference positions {:?} do not match {k} states",
            ref_positions.shape()
        ));
    }
    let hid = linear(h, &w.hidden)?.map(relu);
    let offset = linear(&hid, &w.offset)?;
    let size = linear(&hid, &w.size)?;
    let sin = linear(&hid, &w.sin)?;
    let cos = linear(&hid, &w.cos)?;
    let cls = linear(&hid, &w.cls)?;
    let obj = linear(&hid, &w.obj)?;
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let r = ref_positions.row(i);
        let o = offset.row(i);
        let s = size.row(i);
        let center = [r[0] + o[0], r[1] + o[1], r[2] + o[2]];
        let dims = [
            softplus(s[0]) + size_floor,
            softplus(s[1]) + size_floor,
            softplus(s[2]) + size_floor,
        ];
        let yaw = sin.data()[i].atan2(cos.data()[i]);
        let bbox = Box3D::new(center, dims, yaw)?;
        let class_logits = Tensor::new(vec![cls.last_dim()], cls.row(i).to_vec())?;
        out.push(Detection {
            bbox,
            class_logits,
            objectness: sigmoid(obj.data()[i]),
        });
    }
    Ok(out)
}

/// Weights of one decoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayerWeights {
    pub ibs: IbsWeights,
    pub encoder: SpatialEncoder,
    pub attn: AttentionWeights,
    pub gffn_x: GffnWeights,
    pub gffn_h: Option<GffnWeights>,
}

impl DecoderLayerWeights {
    pub fn init(rng: &mut PrngStream, cfg: &DecoderConfig) -> Result<Self> {
        let c = cfg.hidden_dim;
        let ibs = IbsWeights::init(rng, c, cfg.scan_dim, cfg.corr_dim, cfg.kernel_size);
        let encoder = match cfg.correlation {
            CorrelationMode::Table => {
                SpatialEncoder::Table(CorrelationTable::init(rng, cfg.corr_dim, cfg.table_extent)?)
            }
            CorrelationMode::Mlp => {
                SpatialEncoder::Mlp(CorrelationMlp::init(rng, cfg.mlp_hidden, cfg.corr_dim))
            }
        };
        let attn = AttentionWeights::init(rng, c);
        let gffn_x = GffnWeights::init(
            rng,
            c,
            cfg.ffn_dim,
            cfg.gffn_dwconv.then_some(cfg.kernel_size),
        );
        let gffn_h = cfg
            .gffn_states
            .then(|| GffnWeights::init(rng, c, cfg.ffn_dim, None));
        Ok(DecoderLayerWeights {
            ibs,
            encoder,
            attn,
            gffn_x,
            gffn_h,
        })
    }

    /// Zeros every projection that feeds a residual sum.
    pub fn zero_residual_branches(&mut self) {
        self.ibs.zero_residual_branches();
        self.attn.out.zero_out();
        self.gffn_x.out.zero_out();
        if let Some(g) = &mut self.gffn_h {
            g.out.zero_out();
        }
    }
}

impl Parameters for DecoderLayerWeights {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        self.ibs.visit(&join_name(prefix, "ibs"), v);
        self.encoder.visit(&join_name(prefix, "corr"), v);
        self.attn.visit(&join_name(prefix, "attn"), v);
        self.gffn_x.visit(&join_name(prefix, "gffn_x"), v);
        if let Some(g) = &mut self.gffn_h {
            g.visit(&join_name(prefix, "gffn_h"), v);
        }
    }
}

/// All decoder weights: positional embedding, layers, shared head, and the
/// per-point objectness classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderWeights {
    pub pos_hidden: LinearWeights,
    pub pos_out: LinearWeights,
    pub layers: Vec<DecoderLayerWeights>,
    pub head: HeadWeights,
    pub scene_obj: LinearWeights,
}

impl DecoderWeights {
    /// Each component draws from its own fork of `seed`, so e.g. changing the
    /// number of layers leaves the head weights unchanged.
    pub fn init(seed: u64, cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let root = PrngStream::new(seed);
        let c = cfg.hidden_dim;
        let mut rng = root.fork(0);
        let pos_hidden = LinearWeights::init(&mut rng, 3, c, true);
        let pos_out = LinearWeights::init(&mut rng, c, c, true);
        let layers = (0..cfg.num_layers)
            .map(|l| DecoderLayerWeights::init(&mut root.fork(100 + l as u64), cfg))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = root.fork(1);
        let head = HeadWeights::init(&mut rng, c, cfg.num_classes);
        let scene_obj = LinearWeights::init(&mut root.fork(2), c, 1, true);
        Ok(DecoderWeights {
            pos_hidden,
            pos_out,
            layers,
            head,
            scene_obj,
        })
    }

    pub fn zero_residual_branches(&mut self) {
        for l in &mut self.layers {
            l.zero_residual_branches();
        }
    }
}

impl Parameters for DecoderWeights {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        self.pos_hidden.visit(&join_name(prefix, "pos.hidden"), v);
        self.pos_out.visit(&join_name(prefix, "pos.out"), v);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit(&join_name(prefix, &format!("layers.{i}")), v);
        }
        self.head.visit(&join_name(prefix, "head"), v);
        self.scene_obj.visit(&join_name(prefix, "scene_obj"), v);
    }
}

/// Scene geometry seen by one layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerGeometry<'a> {
    /// Scene positions in the original index order, M×3.
    pub positions: &'a Tensor,
    pub bounds: &'a Bounds,
    /// One box per state.
    pub boxes: &'a [Box3D],
}

/// Scene-stream part of a layer after serialization: scan, then the
/// state/scene feed-forward blocks. Inputs and outputs are in scan order.
pub fn layer_core(
    xs: &Tensor,
    h: &Tensor,
    points: &Tensor,
    boxes: &[Box3D],
    w: &DecoderLayerWeights,
    cfg: &DecoderConfig,
) -> Result<(Tensor, Tensor)> {
    let inp = IbsInputs {
        x: xs,
        h0: h,
        points,
        boxes,
    };
    let (y, h1) = ibs_forward(&inp, &w.ibs, &w.encoder, cfg.delay_metric)?;
    let h2 = inter_state_attention(&h1, &w.attn, cfg.heads)?;
    let (x3, h3) = rayon::join(
        || gffn(&y, &w.gffn_x, cfg.gffn_dwconv),
        || match &w.gffn_h {
            Some(g) => gffn(&h2, g, false),
            None => Ok(h2.clone()),
        },
    );
    Ok((x3?, h3?))
}

/// One decoder layer. `x'` keeps the row order of `x`.
pub fn decoder_layer(
    x: &Tensor,
    h: &Tensor,
    geom: &LayerGeometry,
    layer: usize,
    w: &DecoderLayerWeights,
    cfg: &DecoderConfig,
) -> Result<(Tensor, Tensor)> {
    let order = SerializationOrder::new(order_for_layer(layer), cfg.bits)?;
    let perm = serialize(geom.positions, order, geom.bounds)?;
    let idx = perm.indices();
    let xs = x.gather_outer(idx)?;
    let ps = geom.positions.gather_outer(idx)?;
    let (xo, ho) = layer_core(&xs, h, &ps, geom.boxes, w, cfg)?;
    Ok((xo.scatter_outer(idx)?, ho))
}

/// Outputs after one layer.
#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub x: Tensor,
    pub h: Tensor,
    pub detections: Vec<Detection>,
}

#[derive(Clone, Debug)]
pub struct StackOutput {
    /// Scene indices chosen as initial states.
    pub state_indices: Vec<usize>,
    /// Scene features after the positional embedding, before layer 0.
    pub x0: Tensor,
    pub h0: Tensor,
    pub initial_detections: Vec<Detection>,
    pub layers: Vec<LayerOutput>,
}

/// `features + MLP(positions)`.
pub fn embed_positions(features: &Tensor, positions: &Tensor, w: &DecoderWeights) -> Result<Tensor> {
    let e = linear(&linear(positions, &w.pos_hidden)?.map(relu), &w.pos_out)?;
    features.add(&e)
}

pub fn decoder_stack(scene: &Scene, cfg: &DecoderConfig, w: &DecoderWeights) -> Result<StackOutput> {
    cfg.validate()?;
    let m = scene.num_points();
    let k = cfg.num_states;
    if m < k {
        return Err(Error::Argument(format!("{m} scene points cannot seed {k} states")));
    }
    if scene.features.shape() != [m, cfg.hidden_dim] {
        return dim_err(format!(
            "scene features {:?}, expected [{m}, {}]",
            scene.features.shape(),
            cfg.hidden_dim
        ));
    }
    if w.layers.len() != cfg.num_layers {
        return Err(Error::Config(format!(
            "{} layer weights for {} layers",
            w.layers.len(),
            cfg.num_layers
        )));
    }
    let x0 = embed_positions(&scene.features, &scene.positions, w)?;
    let state_indices = crate::geometry::farthest_point_sampling(&scene.positions, k, 0)?;
    let h0 = x0.gather_outer(&state_indices)?;
    let refs = scene.positions.gather_outer(&state_indices)?;
    let bounds = Bounds::from_points(&scene.positions)?;
    let initial_detections = detection_head(&h0, &refs, &w.head, cfg.size_floor)?;

    let mut boxes: Vec<Box3D> = initial_detections.iter().map(|d| d.bbox).collect();
    let (mut x, mut h) = (x0.clone(), h0.clone());
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for (l, lw) in w.layers.iter().enumerate() {
        let geom = LayerGeometry {
            positions: &scene.positions,
            bounds: &bounds,
            boxes: &boxes,
        };
        let (xn, hn) = decoder_layer(&x, &h, &geom, l, lw, cfg)?;
        let detections = detection_head(&hn, &refs, &w.head, cfg.size_floor)?;
        boxes = detections.iter().map(|d| d.bbox).collect();
        x = xn;
        h = hn;
        layers.push(LayerOutput {
            x: x.clone(),
            h: h.clone(),
            detections,
        });
    }
    Ok(StackOutput {
        state_indices,
        x0,
        h0,
        initial_detections,
        layers,
    })
}

/// Per-point foreground probability from scene features, M.
pub fn scene_objectness(x: &Tensor, w: &LinearWeights) -> Result<Tensor> {
    let logits = linear(x, w)?;
    let m = logits.shape()[0];
    logits.map(sigmoid).reshape(&[m])
}

/// Mean of `−α_t (1 − p_t)^γ log p_t`.
pub fn binary_focal_loss(pred: &Tensor, target: &Tensor, gamma: f64, alpha_bal: f64) -> Result<f64> {
    if pred.ndim() != 1 || pred.shape() != target.shape() {
        return dim_err(format!(
            "predictions {:?} and targets {:?} must be matching vectors",
            pred.shape(),
            target.shape()
        ));
    }
    if pred.numel() == 0 {
        return dim_err("focal loss over zero points");
    }
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Argument(format!("gamma must be >= 0, got {gamma}")));
    }
    if !(alpha_bal > 0.0 && alpha_bal < 1.0) {
        return Err(Error::Argument(format!("alpha must be in (0, 1), got {alpha_bal}")));
    }
    let mut total = 0.0;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Argument(format!("probability {p} outside [0, 1]")));
        }
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let (pt, at) = if t == 1.0 {
            (p, alpha_bal)
        } else if t == 0.0 {
            (1.0 - p, 1.0 - alpha_bal)
        } else {
            return Err(Error::Argument(format!("target {t} is not 0 or 1")));
        };
        total += -at * (1.0 - pt).powf(gamma) * pt.ln();
    }
    Ok(total / pred.numel() as f64)
}

/// 1 for points inside (or on) any ground-truth box.
pub fn objectness_labels(scene: &Scene) -> Tensor {
    let m = scene.num_points();
    Tensor::from_fn(&[m], |i| {
        let p = crate::geometry::point_at(&scene.positions, i);
        if scene.gt_boxes.iter().any(|b| point_in_box(p, b)) {
            1.0
        } else {
            0.0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{synth_scene, SceneSpec};
    use crate::numerics::{prng_fill, Distribution};
    use proptest::prelude::*;

    fn small_cfg() -> DecoderConfig {
        DecoderConfig {
            num_layers: 3,
            hidden_dim: 8,
            scan_dim: 8,
            corr_dim: 4,
            ffn_dim: 16,
            heads: 2,
            kernel_size: 4,
            num_states: 4,
            ..DecoderConfig::default()
        }
    }

    fn normal(rng: &mut PrngStream, shape: &[usize]) -> Tensor {
        prng_fill(rng, shape, Distribution::Normal { mean: 0.0, std: 1.0 }).unwrap()
    }

    fn scene(seed: u64, c: usize) -> Scene {
        synth_scene(&SceneSpec {
            num_boxes: 2,
            points_per_box: 20,
            noise_points: 20,
            seed,
            feature_dim: c,
            ..SceneSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(DecoderConfig::default().validate().is_ok());
        for bad in [
            DecoderConfig { num_layers: 0, ..DecoderConfig::default() },
            DecoderConfig { kernel_size: 0, ..DecoderConfig::default() },
            DecoderConfig { heads: 3, ..DecoderConfig::default() },
            DecoderConfig { bits: 0, ..DecoderConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
        let parsed: DecoderConfig = serde_json::from_str(r#"{"num_layers": 2}"#).unwrap();
        assert_eq!(parsed.num_layers, 2);
        assert_eq!(parsed.kernel_size, 8);
        assert!(serde_json::from_str::<DecoderConfig>(r#"{"layers": 2}"#).is_err());
    }

    #[test]
    fn attention_cases() {
        let mut rng = PrngStream::new(1);
        let mut w = AttentionWeights::init(&mut rng, 8);
        let h = normal(&mut rng, &[4, 8]);
        let out = inter_state_attention(&h, &w, 2).unwrap();
        let n = w.norm.apply(&h).unwrap();
        let a = softmax_attention(
            &linear(&n, &w.q).unwrap(),
            &linear(&n, &w.k).unwrap(),
            &linear(&n, &w.v).unwrap(),
            2,
        )
        .unwrap();
        let want = h.add(&linear(&a, &w.out).unwrap()).unwrap();
        assert!(out.max_abs_diff(&want) < 1e-12);

        let one = normal(&mut rng, &[1, 8]);
        let got = inter_state_attention(&one, &w, 2).unwrap();
        let v = linear(&w.norm.apply(&one).unwrap(), &w.v).unwrap();
        let want = one.add(&linear(&v, &w.out).unwrap()).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-12);

        w.out.zero_out();
        assert_eq!(inter_state_attention(&h, &w, 2).unwrap(), h);
    }

    #[test]
    fn gffn_cases() {
        let mut rng = PrngStream::new(2);
        let w = GffnWeights::init(&mut rng, 6, 10, Some(3));
        let t = normal(&mut rng, &[7, 6]);
        for dw in [false, true] {
            let got = gffn(&t, &w, dw).unwrap();
            let n = w.norm.apply(&t).unwrap();
            let g = linear(&n, &w.gate).unwrap();
            let v = linear(&n, &w.value).unwrap();
            let conv = w.conv.as_ref().unwrap();
            for i in 0..7 {
                let mut prod = [0.0; 10];
                for (f, p) in prod.iter_mut().enumerate() {
                    let val = if dw {
                        (0..3)
                            .filter(|&j| j <= i)
                            .map(|j| conv.get(&[f, j]) * v.get(&[i - j, f]))
                            .sum::<f64>()
                    } else {
                        v.get(&[i, f])
                    };
                    *p = silu(g.get(&[i, f])) * val;
                }
                for o in 0..6 {
                    let mut acc = t.get(&[i, o]);
                    for (f, p) in prod.iter().enumerate() {
                        acc += w.out.weight.get(&[o, f]) * p;
                    }
                    assert!((got.get(&[i, o]) - acc).abs() < 1e-12);
                }
            }
        }
        let mut closed = w.clone();
        closed.gate.zero_out();
        assert_eq!(gffn(&t, &closed, true).unwrap(), t);
        let mut no_out = w.clone();
        no_out.out.zero_out();
        assert_eq!(gffn(&t, &no_out, false).unwrap(), t);
        let no_conv = GffnWeights::init(&mut rng, 6, 10, None);
        assert!(gffn(&t, &no_conv, true).is_err());
    }

    #[test]
    fn zero_head_conventions() {
        let w = HeadWeights::zeros(8, 10);
        let h = normal(&mut PrngStream::new(3), &[3, 8]);
        let refs = Tensor::new(vec![3, 3], (0..9).map(|v| v as f64).collect()).unwrap();
        let dets = detection_head(&h, &refs, &w, 0.05).unwrap();
        assert_eq!(dets.len(), 3);
        for (i, d) in dets.iter().enumerate() {
            assert_eq!(d.bbox.center(), [refs.get(&[i, 0]), refs.get(&[i, 1]), refs.get(&[i, 2])]);
            let s = 2f64.ln() + 0.05;
            assert!(d.bbox.size().iter().all(|&v| (v - s).abs() < 1e-15));
            assert_eq!(d.bbox.yaw(), 0.0);
            assert_eq!(d.objectness, 0.5);
            assert_eq!(d.class(), 0);
        }
    }

    #[test]
    fn focal_loss_values() {
        let p = Tensor::new(vec![1], vec![0.3]).unwrap();
        let t = Tensor::new(vec![1], vec![1.0]).unwrap();
        let l = binary_focal_loss(&p, &t, 2.0, 0.25).unwrap();
        assert!((l - 0.25 * 0.49 * -(0.3f64.ln())).abs() < 1e-15);
        assert!((l - 0.14749).abs() < 1e-5);

        let p = Tensor::new(vec![4], vec![0.1, 0.8, 0.55, 0.97]).unwrap();
        let t = Tensor::new(vec![4], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let bce: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&p, &t): (&f64, &f64)| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln()))
            .sum::<f64>()
            / 4.0;
        let l = binary_focal_loss(&p, &t, 0.0, 0.5).unwrap();
        assert!((l - 0.5 * bce).abs() < 1e-12);

        let sure = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let t = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        assert!(binary_focal_loss(&sure, &t, 2.0, 0.25).unwrap() < 1e-20);

        let bad = Tensor::new(vec![1], vec![0.5]).unwrap();
        let t = Tensor::new(vec![1], vec![0.5]).unwrap();
        assert!(binary_focal_loss(&bad, &t, 2.0, 0.25).is_err());
        assert!(binary_focal_loss(&bad, &bad, -1.0, 0.25).is_err());
        assert!(binary_focal_loss(&bad, &bad, 2.0, 1.0).is_err());
    }

    #[test]
    fn labels() {
        let mut s = scene(4, 4);
        let surface = 2 * 20;
        let labels = objectness_labels(&s);
        assert!(labels.data()[..surface].iter().all(|&v| v == 1.0));
        for (i, &l) in labels.data().iter().enumerate() {
            let p = crate::geometry::point_at(&s.positions, i);
            assert_eq!(l == 1.0, s.gt_boxes.iter().any(|b| point_in_box(p, b)));
        }
        s.gt_boxes.clear();
        assert!(objectness_labels(&s).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_keeps_row_order() {
        let cfg = small_cfg();
        let s = scene(5, 8);
        let mut w = DecoderWeights::init(9, &cfg).unwrap();
        w.zero_residual_branches();
        // Tag rows so any reordering would show.
        let x = Tensor::from_fn(&[s.num_points(), 8], |i| (i / 8) as f64);
        let h = normal(&mut PrngStream::new(6), &[4, 8]);
        let bounds = Bounds::from_points(&s.positions).unwrap();
        let boxes = vec![s.gt_boxes[0]; 4];
        let geom = LayerGeometry { positions: &s.positions, bounds: &bounds, boxes: &boxes };
        for layer in 0..6 {
            let (xo, ho) = decoder_layer(&x, &h, &geom, layer, &w.layers[0], &cfg).unwrap();
            assert_eq!(xo, x);
            assert_eq!(ho, h);
        }
    }

    #[test]
    fn stack_identity_and_simultaneous_update() {
        let cfg = small_cfg();
        let s = scene(7, 8);
        let w = DecoderWeights::init(11, &cfg).unwrap();
        let out = decoder_stack(&s, &cfg, &w).unwrap();
        assert_eq!(out.layers.len(), 3);
        let (mut px, mut ph) = (&out.x0, &out.h0);
        for l in &out.layers {
            assert_eq!(l.detections.len(), 4);
            assert!(l.x.sub(px).unwrap().norm() > 0.0);
            assert!(l.h.sub(ph).unwrap().norm() > 0.0);
            for d in &l.detections {
                assert!(d.bbox.is_valid());
                assert!(d.class_logits.data().iter().all(|v| v.is_finite()));
            }
            px = &l.x;
            ph = &l.h;
        }
        let mut z = w.clone();
        z.zero_residual_branches();
        let out = decoder_stack(&s, &cfg, &z).unwrap();
        for l in &out.layers {
            assert_eq!(l.x, out.x0);
            assert_eq!(l.h, out.h0);
        }
    }

    #[test]
    fn stack_rejects_too_few_points() {
        let cfg = DecoderConfig { num_states: 500, ..small_cfg() };
        let s = scene(8, 8);
        let w = DecoderWeights::init(1, &cfg).unwrap();
        assert!(matches!(decoder_stack(&s, &cfg, &w), Err(Error::Argument(_))));
    }

    #[test]
    fn single_layer_stack_is_one_layer_call() {
        let cfg = DecoderConfig { num_layers: 1, ..small_cfg() };
        let s = scene(9, 8);
        let w = DecoderWeights::init(3, &cfg).unwrap();
        let out = decoder_stack(&s, &cfg, &w).unwrap();
        let bounds = Bounds::from_points(&s.positions).unwrap();
        let boxes: Vec<Box3D> = out.initial_detections.iter().map(|d| d.bbox).collect();
        let geom = LayerGeometry { positions: &s.positions, bounds: &bounds, boxes: &boxes };
        let (x, h) = decoder_layer(&out.x0, &out.h0, &geom, 0, &w.layers[0], &cfg).unwrap();
        assert_eq!(out.layers[0].x, x);
        assert_eq!(out.layers[0].h, h);
    }

    #[test]
    fn mlp_correlation_stack_runs() {
        let cfg = DecoderConfig {
            correlation: CorrelationMode::Mlp,
            delay_metric: DelayMetric::Surface,
            gffn_states: false,
            gffn_dwconv: false,
            ..small_cfg()
        };
        let s = scene(10, 8);
        let w = DecoderWeights::init(4, &cfg).unwrap();
        let out = decoder_stack(&s, &cfg, &w).unwrap();
        assert!(out.layers.iter().all(|l| l.x.data().iter().all(|v| v.is_finite())));
    }

    proptest! {
        #[test]
        fn head_boxes_are_valid(seed in 0u64..1000) {
            let mut rng = PrngStream::new(seed);
            let w = HeadWeights::init(&mut rng, 8, 10);
            let h = normal(&mut rng, &[3, 8]).scale(10.0);
            let refs = normal(&mut rng, &[3, 3]);
            for d in detection_head(&h, &refs, &w, 0.05).unwrap() {
                prop_assert!(d.bbox.is_valid());
                prop_assert!(d.bbox.size().iter().all(|&s| s >= 0.05));
                prop_assert!(d.objectness > 0.0 && d.objectness < 1.0);
            }
        }

        #[test]
        fn focal_loss_decreases_with_confidence(p in 0.01f64..0.98, gamma in 0.0f64..4.0, alpha in 0.05f64..0.95) {
            let one = Tensor::new(vec![1], vec![1.0]).unwrap();
            let lo = binary_focal_loss(&Tensor::new(vec![1], vec![p]).unwrap(), &one, gamma, alpha).unwrap();
            let hi = binary_focal_loss(&Tensor::new(vec![1], vec![p + 0.01]).unwrap(), &one, gamma, alpha).unwrap();
            prop_assert!(lo >= 0.0 && hi >= 0.0);
            prop_assert!(hi < lo);
        }
    }
}
