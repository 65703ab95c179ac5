//! Rotated 3D boxes, synthetic scenes and initial state sampling.
//!
//! Boxes rotate about +z only. Vertices follow a fixed order: the sign of
//! each half-extent iterates z fastest, then y, then x, starting from the
//! negative side, before rotation and translation.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{Distribution, PrngStream, Tensor, prng_fill};

/// Slack on the unit box-local cube so surface points count as inside.
pub const BOUNDARY_EPS: f64 = 1e-9;

pub type Vec3 = [f64; 3];

#[inline]
fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn norm3(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Maps an angle to `(−π, π]`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    let y = yaw.rem_euclid(2.0 * PI);
    if y > PI {
        y - 2.0 * PI
    } else {
        y
    }
}

/// Rotated 3D bounding box: center, full extents and yaw about z.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BoxRecord", into = "BoxRecord")]
pub struct Box3D {
    center: Vec3,
    size: Vec3,
    yaw: f64,
    class_id: Option<u32>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxRecord {
    center: Vec3,
    size: Vec3,
    yaw: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class: Option<u32>,
}

impl TryFrom<BoxRecord> for Box3D {
    type Error = Error;

    fn try_from(r: BoxRecord) -> Result<Self> {
        Ok(Box3D::new(r.center, r.size, r.yaw)?.with_class(r.class))
    }
}

impl From<Box3D> for BoxRecord {
    fn from(b: Box3D) -> Self {
        BoxRecord {
            center: b.center,
            size: b.size,
            yaw: b.yaw,
            class: b.class_id,
        }
    }
}

impl Box3D {
    pub fn new(center: Vec3, size: Vec3, yaw: f64) -> Result<Self> {
        if !center.iter().all(|v| v.is_finite()) || !yaw.is_finite() {
            return Err(Error::NonFinite("box center/yaw".into()));
        }
        if !size.iter().all(|&s| s.is_finite() && s > 0.0) {
            return Err(Error::Argument(format!("box size must be positive, got {size:?}")));
        }
        Ok(Box3D {
            center,
            size,
            yaw: normalize_yaw(yaw),
            class_id: None,
        })
    }

    pub fn with_class(mut self, class_id: Option<u32>) -> Self {
        self.class_id = class_id;
        self
    }

    pub fn center(&self) -> Vec3 {
        self.center
    }

    pub fn size(&self) -> Vec3 {
        self.size
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    pub fn class_id(&self) -> Option<u32> {
        self.class_id
    }

    /// True when every field satisfies the box invariants.
    pub fn is_valid(&self) -> bool {
        self.center.iter().all(|v| v.is_finite())
            && self.size.iter().all(|&s| s.is_finite() && s > 0.0)
            && self.yaw.is_finite()
            && self.yaw > -PI
            && self.yaw <= PI
    }

    fn rotate(&self, v: Vec3, angle: f64) -> Vec3 {
        let (s, c) = angle.sin_cos();
        [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]]
    }

    /// The eight corners in canonical order.
    pub fn vertices(&self) -> [Vec3; 8] {
        let half = self.size.map(|s| 0.5 * s);
        std::array::from_fn(|i| {
            let sign = |bit: usize| if (i >> bit) & 1 == 1 { 1.0 } else { -1.0 };
            let local = [sign(2) * half[0], sign(1) * half[1], sign(0) * half[2]];
            let r = self.rotate(local, self.yaw);
            [r[0] + self.center[0], r[1] + self.center[1], r[2] + self.center[2]]
        })
    }

    /// Radius of the sphere through all eight vertices.
    pub fn circumscribed_radius(&self) -> f64 {
        0.5 * norm3(self.size)
    }

    /// World point to the box frame, scaled so faces sit at ±1.
    pub fn to_local(&self, p: Vec3) -> Vec3 {
        let r = self.rotate(sub(p, self.center), -self.yaw);
        [
            r[0] / (0.5 * self.size[0]),
            r[1] / (0.5 * self.size[1]),
            r[2] / (0.5 * self.size[2]),
        ]
    }

    pub fn from_local(&self, u: Vec3) -> Vec3 {
        let scaled = [
            u[0] * 0.5 * self.size[0],
            u[1] * 0.5 * self.size[1],
            u[2] * 0.5 * self.size[2],
        ];
        let r = self.rotate(scaled, self.yaw);
        [r[0] + self.center[0], r[1] + self.center[1], r[2] + self.center[2]]
    }

    /// Euclidean distance from `p` to the box (zero inside).
    pub fn distance_to_surface(&self, p: Vec3) -> f64 {
        let r = self.rotate(sub(p, self.center), -self.yaw);
        let d: Vec3 = std::array::from_fn(|a| (r[a].abs() - 0.5 * self.size[a]).max(0.0));
        norm3(d)
    }

    pub fn distance_to_nearest_vertex(&self, p: Vec3) -> f64 {
        self.vertices()
            .iter()
            .map(|&v| norm3(sub(p, v)))
            .fold(f64::INFINITY, f64::min)
    }
}

pub fn box_vertices(b: &Box3D) -> Tensor {
    Tensor::from_raw(vec![8, 3], b.vertices().concat())
}

pub fn circumscribed_radius(b: &Box3D) -> f64 {
    b.circumscribed_radius()
}

fn points3(points: &Tensor) -> Result<usize> {
    let (m, d) = points.dims2()?;
    if d != 3 {
        return dim_err(format!("points must be M×3, got {:?}", points.shape()));
    }
    Ok(m)
}

pub(crate) fn point_at(points: &Tensor, i: usize) -> Vec3 {
    let r = points.row(i);
    [r[0], r[1], r[2]]
}

/// `offsets[m, j, :] = points[m, :] − vertex_j(box)`, shape M×8×3.
pub fn relative_offsets(points: &Tensor, b: &Box3D) -> Result<Tensor> {
    let m = points3(points)?;
    let verts = b.vertices();
    let mut out = Vec::with_capacity(m * 24);
    for i in 0..m {
        let p = point_at(points, i);
        for v in &verts {
            out.extend_from_slice(&sub(p, *v));
        }
    }
    Ok(Tensor::from_raw(vec![m, 8, 3], out))
}

/// Points in the box's yaw-aligned frame, divided by the half extents.
pub fn box_local_coords(points: &Tensor, b: &Box3D) -> Result<Tensor> {
    let m = points3(points)?;
    let mut out = Vec::with_capacity(m * 3);
    for i in 0..m {
        out.extend_from_slice(&b.to_local(point_at(points, i)));
    }
    Ok(Tensor::from_raw(vec![m, 3], out))
}

/// True iff all box-local coordinates lie in `[−1, 1]` (with [`BOUNDARY_EPS`] slack).
pub fn point_in_box(p: Vec3, b: &Box3D) -> bool {
    b.to_local(p).iter().all(|u| u.abs() <= 1.0 + BOUNDARY_EPS)
}

/// Greedy max-min sampling starting at `start`; ties go to the lowest index.
pub fn farthest_point_sampling(positions: &Tensor, k: usize, start: usize) -> Result<Vec<usize>> {
    let m = points3(positions)?;
    if k == 0 || k > m {
        return Err(Error::Argument(format!("cannot sample {k} of {m} points")));
    }
    if start >= m {
        return Err(Error::Argument(format!("start index {start} out of range {m}")));
    }
    let mut chosen = vec![false; m];
    let mut min_d = vec![f64::INFINITY; m];
    let mut out = Vec::with_capacity(k);
    let mut cur = start;
    loop {
        chosen[cur] = true;
        out.push(cur);
        if out.len() == k {
            return Ok(out);
        }
        let c = point_at(positions, cur);
        let mut best = None;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..m {
            let d = norm3(sub(point_at(positions, i), c));
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !chosen[i] && min_d[i] > best_d {
                best_d = min_d[i];
                best = Some(i);
            }
        }
        cur = best.expect("k <= m leaves an unchosen point");
    }
}

/// Scene points with features plus ground-truth boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub positions: Tensor,
    pub colors: Option<Tensor>,
    pub features: Tensor,
    pub gt_boxes: Vec<Box3D>,
}

impl Scene {
    pub fn new(
        positions: Tensor,
        colors: Option<Tensor>,
        features: Tensor,
        gt_boxes: Vec<Box3D>,
    ) -> Result<Self> {
        let m = points3(&positions)?;
        if m == 0 {
            return Err(Error::Argument("scene has no points".into()));
        }
        positions.check_finite("scene positions")?;
        if let Some(c) = &colors {
            if c.shape() != [m, 3] {
                return dim_err("colors must be M×3");
            }
        }
        if features.ndim() != 2 || features.shape()[0] != m {
            return dim_err(format!(
                "features {:?} do not match {m} points",
                features.shape()
            ));
        }
        Ok(Scene {
            positions,
            colors,
            features,
            gt_boxes,
        })
    }

    pub fn num_points(&self) -> usize {
        self.positions.shape()[0]
    }
}

/// Object candidates acting as the scan's system states.
#[derive(Clone, Debug, PartialEq)]
pub struct StateSet {
    pub positions: Tensor,
    pub features: Tensor,
    pub boxes: Vec<Box3D>,
}

impl StateSet {
    pub fn new(positions: Tensor, features: Tensor, boxes: Vec<Box3D>) -> Result<Self> {
        let k = points3(&positions)?;
        if k == 0 {
            return Err(Error::Argument("state set is empty".into()));
        }
        if features.ndim() != 2 || features.shape()[0] != k || boxes.len() != k {
            return dim_err("state features/boxes must have one entry per state point");
        }
        Ok(StateSet {
            positions,
            features,
            boxes,
        })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Parameters of a synthetic room.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub num_boxes: usize,
    pub points_per_box: usize,
    pub noise_points: usize,
    /// Half-width of the cubic room `[−extent, extent]³`, meters.
    pub extent: f64,
    pub seed: u64,
    pub feature_dim: usize,
    pub with_color: bool,
    pub num_classes: u32,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            num_boxes: 3,
            points_per_box: 200,
            noise_points: 500,
            extent: 4.0,
            seed: 0,
            feature_dim: 32,
            with_color: false,
            num_classes: 10,
        }
    }
}

/// Samples boxes inside the room, points on their faces, and uniform noise.
pub fn synth_scene(spec: &SceneSpec) -> Result<Scene> {
    let total = spec.num_boxes * spec.points_per_box + spec.noise_points;
    if total == 0 {
        return Err(Error::Argument("scene spec yields zero points".into()));
    }
    if !(spec.extent.is_finite() && spec.extent > 0.0) {
        return Err(Error::Argument("scene extent must be positive".into()));
    }
    if spec.feature_dim == 0 {
        return Err(Error::Argument("feature_dim must be >= 1".into()));
    }
    let ext = spec.extent;
    let mut rng = PrngStream::new(spec.seed);
    let mut boxes = Vec::with_capacity(spec.num_boxes);
    for _ in 0..spec.num_boxes {
        let size: Vec3 = std::array::from_fn(|_| rng.uniform(0.1 * ext, 0.3 * ext));
        let r = 0.5 * norm3(size);
        let center: Vec3 = std::array::from_fn(|_| rng.uniform(-ext + r, ext - r));
        let yaw = rng.uniform(-PI, PI);
        let class = (spec.num_classes > 0).then(|| rng.index(spec.num_classes as usize) as u32);
        boxes.push(Box3D::new(center, size, yaw)?.with_class(class));
    }

    let mut positions = Vec::with_capacity(total * 3);
    let mut colors = Vec::with_capacity(if spec.with_color { total * 3 } else { 0 });
    for b in &boxes {
        let s = b.size();
        // Face areas for the ±x, ±y, ±z pairs.
        let areas = [s[1] * s[2], s[0] * s[2], s[0] * s[1]];
        let total_area: f64 = areas.iter().sum();
        let tint: Vec3 = std::array::from_fn(|_| rng.uniform(0.2, 1.0));
        for _ in 0..spec.points_per_box {
            let pick = rng.uniform(0.0, total_area);
            let axis = if pick < areas[0] {
                0
            } else if pick < areas[0] + areas[1] {
                1
            } else {
                2
            };
            let side = if rng.uniform(0.0, 1.0) < 0.5 { -1.0 } else { 1.0 };
            let mut u: Vec3 = std::array::from_fn(|_| rng.uniform(-1.0, 1.0));
            u[axis] = side;
            positions.extend_from_slice(&b.from_local(u));
            if spec.with_color {
                colors.extend(tint.iter().map(|t| (t + rng.uniform(-0.05, 0.05)).clamp(0.0, 1.0)));
            }
        }
    }
    for _ in 0..spec.noise_points {
        for _ in 0..3 {
            positions.push(rng.uniform(-ext, ext));
        }
        if spec.with_color {
            for _ in 0..3 {
                colors.push(rng.uniform(0.0, 1.0));
            }
        }
    }
    let features = prng_fill(
        &mut rng,
        &[total, spec.feature_dim],
        Distribution::Normal { mean: 0.0, std: 1.0 },
    )?;
    Scene::new(
        Tensor::new(vec![total, 3], positions)?,
        spec.with_color
            .then(|| Tensor::new(vec![total, 3], colors))
            .transpose()?,
        features,
        boxes,
    )
}
