mod support;

use issm::decoder::{decoder_layer, DecoderConfig, DecoderLayerWeights, LayerGeometry};
use issm::geometry::Box3D;
use issm::numerics::{prng_fill, Distribution, PrngStream};
use issm::serialization::{order_for_layer, serialize, Bounds, SerializationOrder};
use issm::Tensor;

use support::algorithm1::ibs_reference;
use support::{attention_block, gffn_block, max_abs_diff, to_mat, Mat};

const M: usize = 16;
const K: usize = 4;

fn config() -> DecoderConfig {
    DecoderConfig {
        num_layers: 2,
        hidden_dim: 8,
        scan_dim: 8,
        corr_dim: 4,
        ffn_dim: 12,
        heads: 2,
        kernel_size: 3,
        num_states: K,
        bits: 4,
        ..DecoderConfig::default()
    }
}

#[allow(clippy::too_many_arguments)]
fn by_hand(
    x: &Tensor,
    h: &Tensor,
    positions: &Tensor,
    bounds: &Bounds,
    boxes: &[Box3D],
    layer: usize,
    w: &DecoderLayerWeights,
    cfg: &DecoderConfig,
) -> (Mat, Mat) {
    let order = SerializationOrder::new(order_for_layer(layer), cfg.bits).unwrap();
    let idx = serialize(positions, order, bounds).unwrap().indices().to_vec();
    let xs = Tensor::from_rows(&idx.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
    let ps =
        Tensor::from_rows(&idx.iter().map(|&i| positions.row(i).to_vec()).collect::<Vec<_>>())
            .unwrap();
    let r = ibs_reference(&xs, h, &ps, boxes, &w.ibs, &w.encoder);
    let h2 = attention_block(&r.h_out, &w.attn, cfg.heads);
    let x3 = gffn_block(&r.y, &w.gffn_x, cfg.gffn_dwconv);
    let h3 = match &w.gffn_h {
        Some(g) => gffn_block(&h2, g, false),
        None => h2,
    };
    let mut x_out = vec![Vec::new(); x3.len()];
    for (pos, &i) in idx.iter().enumerate() {
        x_out[i] = x3[pos].clone();
    }
    (x_out, h3)
}

#[test]
fn layer_equals_hand_composition() {
    let cfg = config();
    for seed in 0..5u64 {
        let mut rng = PrngStream::new(seed);
        let w = DecoderLayerWeights::init(&mut rng, &cfg).unwrap();
        let positions =
            prng_fill(&mut rng, &[M, 3], Distribution::Uniform { low: -2.0, high: 2.0 }).unwrap();
        let x = prng_fill(&mut rng, &[M, cfg.hidden_dim], Distribution::Normal { mean: 0.0, std: 1.0 })
            .unwrap();
        let h = prng_fill(&mut rng, &[K, cfg.hidden_dim], Distribution::Normal { mean: 0.0, std: 1.0 })
            .unwrap();
        let boxes: Vec<Box3D> = (0..K)
            .map(|j| {
                let p = positions.row(j);
                Box3D::new([p[0], p[1], p[2]], [0.8, 0.6, 1.0], 0.3 * j as f64).unwrap()
            })
            .collect();
        let bounds = Bounds::from_points(&positions).unwrap();
        for layer in 0..cfg.num_layers {
            let geom = LayerGeometry {
                positions: &positions,
                bounds: &bounds,
                boxes: &boxes,
            };
            let (xo, ho) = decoder_layer(&x, &h, &geom, layer, &w, &cfg).unwrap();
            let (xr, hr) = by_hand(&x, &h, &positions, &bounds, &boxes, layer, &w, &cfg);
            let ex = max_abs_diff(&xr, &xo);
            let eh = max_abs_diff(&hr, &ho);
            assert!(ex <= 1e-12 && eh <= 1e-12, "seed {seed} layer {layer}: {ex:e} {eh:e}");
            assert!(to_mat(&xo).iter().flatten().all(|v| v.is_finite()));
        }
    }
}
