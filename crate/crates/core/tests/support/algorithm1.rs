//! Straight-line transcription of the bidirectional scan module with scalar
//! loops. The backward direction walks the sequence from the last step to
//! the first instead of reversing buffers, and its convolution looks ahead.

use issm::geometry::Box3D;
use issm::issm::{DirectionWeights, IbsWeights, SpatialEncoder};
use issm::Tensor;

use super::{causal_conv, lin, lin_row, norm, silu, softplus, to_mat, Mat};

pub struct Reference {
    /// M×C.
    pub y: Mat,
    /// K×C.
    pub h_out: Mat,
    /// M×K×D.
    pub s: Vec<Mat>,
    /// M×K.
    pub delay: Mat,
    /// Per direction, M×K×E after softplus and the delay kernel.
    pub delta: [Vec<Mat>; 2],
}

fn local_coords(b: &Box3D, p: [f64; 3]) -> [f64; 3] {
    let c = b.center();
    let s = b.size();
    let (dx, dy, dz) = (p[0] - c[0], p[1] - c[1], p[2] - c[2]);
    let (sn, cs) = b.yaw().sin_cos();
    let lx = cs * dx + sn * dy;
    let ly = -sn * dx + cs * dy;
    [lx / (s[0] / 2.0), ly / (s[1] / 2.0), dz / (s[2] / 2.0)]
}

fn table_sample(grid: &Tensor, extent: f64, u: [f64; 3]) -> Vec<f64> {
    let d = grid.shape()[3];
    let mut i0 = [0usize; 3];
    let mut f = [0.0; 3];
    for a in 0..3 {
        let v = u[a].max(-extent).min(extent);
        let g = (v + extent) / (2.0 * extent) * 9.0;
        let lo = (g.floor() as usize).min(8);
        i0[a] = lo;
        f[a] = g - lo as f64;
    }
    let mut out = vec![0.0; d];
    for dx in 0..2 {
        for dy in 0..2 {
            for dz in 0..2 {
                let wx = if dx == 1 { f[0] } else { 1.0 - f[0] };
                let wy = if dy == 1 { f[1] } else { 1.0 - f[1] };
                let wz = if dz == 1 { f[2] } else { 1.0 - f[2] };
                let cell = ((i0[0] + dx) * 10 + (i0[1] + dy)) * 10 + (i0[2] + dz);
                for (ch, o) in out.iter_mut().enumerate() {
                    *o += wx * wy * wz * grid.data()[cell * d + ch];
                }
            }
        }
    }
    out
}

fn corners(b: &Box3D) -> Vec<[f64; 3]> {
    let c = b.center();
    let s = b.size();
    let (sn, cs) = b.yaw().sin_cos();
    let mut v = Vec::new();
    for sx in [-0.5, 0.5] {
        for sy in [-0.5, 0.5] {
            for sz in [-0.5, 0.5] {
                let (x, y, z) = (sx * s[0], sy * s[1], sz * s[2]);
                v.push([cs * x - sn * y + c[0], sn * x + cs * y + c[1], z + c[2]]);
            }
        }
    }
    v
}

fn correlation(points: &Mat, boxes: &[Box3D], enc: &SpatialEncoder) -> Vec<Mat> {
    points
        .iter()
        .map(|p| {
            let p = [p[0], p[1], p[2]];
            boxes
                .iter()
                .map(|b| match enc {
                    SpatialEncoder::Table(t) => table_sample(t.grid(), t.extent(), local_coords(b, p)),
                    SpatialEncoder::Mlp(mlp) => {
                        let mut acc = vec![0.0; mlp.out.weight.shape()[0]];
                        for v in corners(b) {
                            let off = [p[0] - v[0], p[1] - v[1], p[2] - v[2]];
                            let hid: Vec<f64> =
                                lin_row(&off, &mlp.hidden).into_iter().map(|a| a.max(0.0)).collect();
                            for (a, o) in acc.iter_mut().zip(lin_row(&hid, &mlp.out)) {
                                *a += o;
                            }
                        }
                        acc
                    }
                })
                .collect()
        })
        .collect()
}

fn delays(points: &Mat, boxes: &[Box3D], alpha_raw: f64) -> Mat {
    let alpha = softplus(alpha_raw);
    points
        .iter()
        .map(|p| {
            boxes
                .iter()
                .map(|b| {
                    let s = b.size();
                    let r = (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt() / 2.0;
                    let c = b.center();
                    let d = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt();
                    (alpha * (r - d).min(0.0)).exp()
                })
                .collect()
        })
        .collect()
}

struct DirOut {
    y_hat: Mat,
    h_n: Mat,
    delta: Vec<Mat>,
}

fn direction(
    x_hat: &Mat,
    s: &[Mat],
    delay: &Mat,
    h0_hat: &Mat,
    w: &DirectionWeights,
    order: &[usize],
) -> DirOut {
    let (m, k, e) = (x_hat.len(), h0_hat.len(), x_hat[0].len());
    let x_o: Mat = causal_conv(x_hat, &w.conv, order)
        .into_iter()
        .map(|r| r.into_iter().map(silu).collect())
        .collect();
    let bx = lin(&x_o, &w.b_x);
    let cx = lin(&x_o, &w.c_x);
    let dx = lin(&x_o, &w.delta_x);
    let mut b = vec![vec![0.0; k]; m];
    let mut c = vec![vec![0.0; k]; m];
    let mut delta = vec![vec![vec![0.0; e]; k]; m];
    for t in 0..m {
        for j in 0..k {
            b[t][j] = bx[t][0] + lin_row(&s[t][j], &w.b_s)[0];
            c[t][j] = cx[t][0] + lin_row(&s[t][j], &w.c_s)[0];
            let ds = lin_row(&s[t][j], &w.delta_s);
            for ch in 0..e {
                delta[t][j][ch] = softplus(dx[t][ch] + ds[ch]) * delay[t][j];
            }
        }
    }
    let mut h = h0_hat.clone();
    let mut y_hat = vec![vec![0.0; e]; m];
    for &t in order {
        for j in 0..k {
            for ch in 0..e {
                let a_bar = (delta[t][j][ch] * w.a.data()[ch]).exp();
                let b_bar = delta[t][j][ch] * b[t][j];
                h[j][ch] = a_bar * h[j][ch] + b_bar * x_o[t][ch];
            }
        }
        for ch in 0..e {
            let mut acc = 0.0;
            for j in 0..k {
                acc += c[t][j] * h[j][ch];
            }
            y_hat[t][ch] = acc;
        }
    }
    DirOut { y_hat, h_n: h, delta }
}

pub fn ibs_reference(
    x: &Tensor,
    h0: &Tensor,
    points: &Tensor,
    boxes: &[Box3D],
    w: &IbsWeights,
    enc: &SpatialEncoder,
) -> Reference {
    let (x, h0, points) = (to_mat(x), to_mat(h0), to_mat(points));
    let m = x.len();
    let xn = norm(&x, &w.norm_x);
    let hn = norm(&h0, &w.norm_h);
    let x_hat = lin(&xn, &w.lin_x);
    let z = lin(&xn, &w.lin_z);
    let h0_hat = lin(&hn, &w.lin_h_in);
    let s = correlation(&points, boxes, enc);
    let delay = delays(&points, boxes, w.alpha_raw);

    let fwd_order: Vec<usize> = (0..m).collect();
    let bwd_order: Vec<usize> = (0..m).rev().collect();
    let f = direction(&x_hat, &s, &delay, &h0_hat, &w.forward, &fwd_order);
    let b = direction(&x_hat, &s, &delay, &h0_hat, &w.backward, &bwd_order);

    let fused: Mat = (0..m)
        .map(|t| {
            (0..z[t].len())
                .map(|ch| silu(z[t][ch]) * (f.y_hat[t][ch] + b.y_hat[t][ch]))
                .collect()
        })
        .collect();
    let y: Mat = lin(&fused, &w.lin_y)
        .iter()
        .zip(&x)
        .map(|(a, r)| a.iter().zip(r).map(|(p, q)| p + q).collect())
        .collect();
    let h_sum: Mat = f
        .h_n
        .iter()
        .zip(&b.h_n)
        .map(|(p, q)| p.iter().zip(q).map(|(a, c)| a + c).collect())
        .collect();
    let h_out: Mat = lin(&h_sum, &w.lin_h_out)
        .iter()
        .zip(&h0)
        .map(|(a, r)| a.iter().zip(r).map(|(p, q)| p + q).collect())
        .collect();
    Reference {
        y,
        h_out,
        s,
        delay,
        delta: [f.delta, b.delta],
    }
}
