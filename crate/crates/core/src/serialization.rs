//! Hilbert space-filling-curve serialization of point clouds.
//!
//! Points are quantized onto a `2^bits` grid per axis, the cell coordinates
//! are permuted by one of six axis priorities, and points are stably sorted by
//! the cell's position along the 3D Hilbert curve. The curve index uses
//! Skilling's transpose construction ("Programming the Hilbert curve", 2004).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::geometry::point_at;
use crate::numerics::Tensor;

pub const DEFAULT_BITS: u32 = 9;
pub const MAX_BITS: u32 = 16;

/// Axis priority of the curve; the first letter is the curve's first input axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AxisOrder {
    Xyz,
    Xzy,
    Yxz,
    Yzx,
    Zxy,
    Zyx,
}

impl AxisOrder {
    /// The per-layer cycle.
    pub const ALL: [AxisOrder; 6] = [
        AxisOrder::Xyz,
        AxisOrder::Xzy,
        AxisOrder::Yxz,
        AxisOrder::Yzx,
        AxisOrder::Zxy,
        AxisOrder::Zyx,
    ];

    /// Source axis feeding each curve input.
    pub fn axes(self) -> [usize; 3] {
        match self {
            AxisOrder::Xyz => [0, 1, 2],
            AxisOrder::Xzy => [0, 2, 1],
            AxisOrder::Yxz => [1, 0, 2],
            AxisOrder::Yzx => [1, 2, 0],
            AxisOrder::Zxy => [2, 0, 1],
            AxisOrder::Zyx => [2, 1, 0],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AxisOrder::Xyz => "xyz",
            AxisOrder::Xzy => "xzy",
            AxisOrder::Yxz => "yxz",
            AxisOrder::Yzx => "yzx",
            AxisOrder::Zxy => "zxy",
            AxisOrder::Zyx => "zyx",
        }
    }
}

impl fmt::Display for AxisOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AxisOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AxisOrder::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown axis order '{s}'")))
    }
}

/// Permutes cell coordinates so the order's first axis becomes curve input 0.
pub fn apply_axis_order(cell: [u32; 3], order: AxisOrder) -> [u32; 3] {
    order.axes().map(|a| cell[a])
}

/// Inverse of [`apply_axis_order`].
pub fn unapply_axis_order(cell: [u32; 3], order: AxisOrder) -> [u32; 3] {
    let mut out = [0; 3];
    for (i, a) in order.axes().into_iter().enumerate() {
        out[a] = cell[i];
    }
    out
}

/// Axis order used by decoder layer `layer`.
pub fn order_for_layer(layer: usize) -> AxisOrder {
    AxisOrder::ALL[layer % 6]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SerializationOrder {
    pub axis_order: AxisOrder,
    pub bits: u32,
}

impl SerializationOrder {
    pub fn new(axis_order: AxisOrder, bits: u32) -> Result<Self> {
        if !(1..=MAX_BITS).contains(&bits) {
            return Err(Error::Argument(format!(
                "grid bits must be in [1, {MAX_BITS}], got {bits}"
            )));
        }
        Ok(SerializationOrder { axis_order, bits })
    }
}

/// Position of `cell` along the 3D Hilbert curve of order `bits`.
pub fn hilbert_index(cell: [u32; 3], bits: u32) -> Result<u64> {
    if bits == 0 || 3 * bits > 63 {
        return Err(Error::Argument(format!("unsupported curve order {bits}")));
    }
    if cell.iter().any(|&c| (c as u64) >> bits != 0) {
        return Err(Error::Argument(format!(
            "cell {cell:?} outside a 2^{bits} grid"
        )));
    }
    let mut x = cell;
    let top = 1u32 << (bits - 1);

    // Undo excess work: inverse rotations/reflections from the top bit down.
    let mut q = top;
    while q > 1 {
        let p = q - 1;
        for i in 0..3 {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q >>= 1;
    }

    // Gray encode.
    x[1] ^= x[0];
    x[2] ^= x[1];
    let mut t = 0;
    let mut q = top;
    while q > 1 {
        if x[2] & q != 0 {
            t ^= q - 1;
        }
        q >>= 1;
    }
    for v in &mut x {
        *v ^= t;
    }

    // Interleave the transposed form, most significant bit first.
    let mut h = 0u64;
    for b in (0..bits).rev() {
        for v in &x {
            h = (h << 1) | ((*v >> b) & 1) as u64;
        }
    }
    Ok(h)
}

/// Row-major cell index, the locality baseline.
pub fn row_major_index(cell: [u32; 3], bits: u32) -> u64 {
    let n = 1u64 << bits;
    (cell[0] as u64 * n + cell[1] as u64) * n + cell[2] as u64
}

/// A bijection on `[0, M)`: `indices[rank]` is the original point index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        let n = indices.len();
        let mut seen = vec![false; n];
        for &i in &indices {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Argument("indices are not a permutation".into()));
            }
        }
        Ok(Permutation(indices))
    }

    pub fn identity(n: usize) -> Self {
        Permutation((0..n).collect())
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `ranks[i]` is the sequence position of original index `i`.
    pub fn ranks(&self) -> Vec<usize> {
        let mut r = vec![0; self.0.len()];
        for (rank, &i) in self.0.iter().enumerate() {
            r[i] = rank;
        }
        r
    }

    pub fn inverse(&self) -> Permutation {
        Permutation(self.ranks())
    }
}

/// Axis-aligned quantization bounds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Bounds {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        if (0..3).any(|a| !(max[a] > min[a]) || !min[a].is_finite() || !max[a].is_finite()) {
            return Err(Error::Argument(format!(
                "bounds max must exceed min on every axis: {min:?} / {max:?}"
            )));
        }
        Ok(Bounds { min, max })
    }

    /// Tight bounds of the points; a flat axis gets a unit-width span.
    pub fn from_points(positions: &Tensor) -> Result<Self> {
        let (m, d) = positions.dims2()?;
        if m == 0 || d != 3 {
            return Err(Error::Argument("bounds of an empty or non-3D point set".into()));
        }
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for row in positions.rows() {
            for a in 0..3 {
                min[a] = min[a].min(row[a]);
                max[a] = max[a].max(row[a]);
            }
        }
        for a in 0..3 {
            if !(max[a] > min[a]) {
                max[a] = min[a] + 1.0;
            }
        }
        Bounds::new(min, max)
    }

    /// Grid cell of `p`, clamped to the grid.
    pub fn quantize(&self, p: [f64; 3], bits: u32) -> [u32; 3] {
        let n = (1u64 << bits) as f64;
        std::array::from_fn(|a| {
            let u = (p[a] - self.min[a]) / (self.max[a] - self.min[a]) * n;
            u.floor().clamp(0.0, n - 1.0) as u32
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Curve {
    Hilbert,
    RowMajor,
}

/// Stable sort of points by curve code of their axis-reordered cell.
pub fn serialize_with(
    positions: &Tensor,
    order: SerializationOrder,
    bounds: &Bounds,
    curve: Curve,
) -> Result<Permutation> {
    let (m, d) = positions.dims2()?;
    if d != 3 {
        return dim_err(format!("positions must be M×3, got {:?}", positions.shape()));
    }
    if m == 0 {
        return Err(Error::Argument("cannot serialize an empty point set".into()));
    }
    let mut keyed = Vec::with_capacity(m);
    for i in 0..m {
        let cell = apply_axis_order(bounds.quantize(point_at(positions, i), order.bits), order.axis_order);
        let code = match curve {
            Curve::Hilbert => hilbert_index(cell, order.bits)?,
            Curve::RowMajor => row_major_index(cell, order.bits),
        };
        keyed.push((code, i));
    }
    keyed.sort_unstable();
    Permutation::new(keyed.into_iter().map(|(_, i)| i).collect())
}

pub fn serialize(positions: &Tensor, order: SerializationOrder, bounds: &Bounds) -> Result<Permutation> {
    serialize_with(positions, order, bounds, Curve::Hilbert)
}

/// Mean over points of the mean |rank difference| to each point's `knn`
/// nearest spatial neighbors (ties broken by index). Lower is better.
pub fn locality_score(perm: &Permutation, positions: &Tensor, knn: usize) -> Result<f64> {
    let (m, d) = positions.dims2()?;
    if d != 3 || perm.len() != m {
        return dim_err("permutation length must match M×3 positions");
    }
    if knn == 0 || knn >= m {
        return Err(Error::Argument(format!("knn must be in [1, {m}), got {knn}")));
    }
    let ranks = perm.ranks();
    let mut total = 0.0;
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(knn + 1);
    for i in 0..m {
        let p = point_at(positions, i);
        best.clear();
        for j in 0..m {
            if j == i {
                continue;
            }
            let q = point_at(positions, j);
            let d2 = (0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>();
            if best.len() == knn && (d2, j) >= best[knn - 1] {
                continue;
            }
            let at = best.partition_point(|&e| e < (d2, j));
            best.insert(at, (d2, j));
            best.truncate(knn);
        }
        let s: f64 = best
            .iter()
            .map(|&(_, j)| (ranks[i] as f64 - ranks[j] as f64).abs())
            .sum();
        total += s / knn as f64;
    }
    Ok(total / m as f64)
}
