//! On-disk formats: point clouds, ground-truth sidecars and weight containers.
//!
//! Binary point cloud (`.destpc`), all little-endian:
//!
//! ```text
//! offset  size   field
//! 0       8      magic "DESTPC1\0"
//! 8       4      u32 point count M
//! 12      1      u8 has_color (0 or 1)
//! 13      3      reserved, zero
//! 16      12·M   positions, f32 x y z per point
//! ..      12·M   colors, f32 r g b per point (only if has_color)
//! ```
//!
//! Text point cloud: one point per line, 3 (xyz) or 6 (xyz rgb)
//! whitespace-separated decimals; `#` starts a comment.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Box3D;
use crate::numerics::{DType, ParamVisitor, Parameters, Tensor};

pub const DESTPC_MAGIC: &[u8; 8] = b"DESTPC1\0";
const HEADER_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    /// M×3.
    pub positions: Tensor,
    /// M×3, if present.
    pub colors: Option<Tensor>,
}

impl PointCloud {
    pub fn new(positions: Tensor, colors: Option<Tensor>) -> Result<Self> {
        let (m, three) = positions.dims2()?;
        if three != 3 || colors.as_ref().is_some_and(|c| c.shape() != [m, 3]) {
            return Err(Error::Dimension("point cloud arrays must be M×3".into()));
        }
        Ok(PointCloud { positions, colors })
    }

    pub fn len(&self) -> usize {
        self.positions.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rounds every coordinate through f32, as the binary format stores it.
    pub fn to_f32_precision(&self) -> PointCloud {
        let round = |t: &Tensor| t.map(|v| v as f32 as f64);
        PointCloud {
            positions: round(&self.positions),
            colors: self.colors.as_ref().map(round),
        }
    }
}

pub fn encode_destpc(pc: &PointCloud) -> Result<Vec<u8>> {
    let m = u32::try_from(pc.len())
        .map_err(|_| Error::Format("too many points for a u32 count".into()))?;
    let floats = pc.len() * 3 * if pc.colors.is_some() { 2 } else { 1 };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * floats);
    out.extend_from_slice(DESTPC_MAGIC);
    out.extend_from_slice(&m.to_le_bytes());
    out.push(u8::from(pc.colors.is_some()));
    out.extend_from_slice(&[0; 3]);
    for t in std::iter::once(&pc.positions).chain(pc.colors.as_ref()) {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_destpc(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != DESTPC_MAGIC {
        return Err(Error::Format("missing DESTPC1 header".into()));
    }
    let m = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let has_color = match bytes[12] {
        0 => false,
        1 => true,
        f => return Err(Error::Format(format!("invalid color flag {f}"))),
    };
    if bytes[13..16] != [0, 0, 0] {
        return Err(Error::Format("reserved header bytes must be zero".into()));
    }
    let arrays = if has_color { 2 } else { 1 };
    let expected = HEADER_LEN + arrays * m * 12;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "expected {expected} bytes for {m} points, found {}",
            bytes.len()
        )));
    }
    let read = |start: usize| -> Result<Tensor> {
        let data = bytes[start..start + m * 12]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Tensor::new(vec![m, 3], data)
    };
    let positions = read(HEADER_LEN)?;
    let colors = if has_color {
        Some(read(HEADER_LEN + m * 12)?)
    } else {
        None
    };
    PointCloud::new(positions, colors)
}

/// Shortest decimal that round-trips exactly.
fn decimal_text(v: f64) -> String {
    format!("{v}")
}

pub fn encode_text(pc: &PointCloud) -> String {
    let mut out = String::new();
    out.push_str(&format!("# {} points\n", pc.len()));
    for i in 0..pc.len() {
        let mut fields: Vec<String> = pc.positions.row(i).iter().map(|&v| decimal_text(v)).collect();
        if let Some(c) = &pc.colors {
            fields.extend(c.row(i).iter().map(|&v| decimal_text(v)));
        }
        out.push_str(&fields.join(" "));
        out.push('\n');
    }
    out
}

pub fn decode_text(text: &str) -> Result<PointCloud> {
    let mut pos = Vec::new();
    let mut col = Vec::new();
    let mut width = None;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let vals = line
            .split_whitespace()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::Format(format!("line {}: bad number '{f}'", n + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != 3 && vals.len() != 6 {
            return Err(Error::Format(format!(
                "line {}: expected 3 or 6 values, found {}",
                n + 1,
                vals.len()
            )));
        }
        if *width.get_or_insert(vals.len()) != vals.len() {
            return Err(Error::Format(format!("line {}: mixed 3/6-column rows", n + 1)));
        }
        pos.extend_from_slice(&vals[..3]);
        col.extend_from_slice(&vals[3..]);
    }
    let m = pos.len() / 3;
    let colors = if width == Some(6) {
        Some(Tensor::new(vec![m, 3], col)?)
    } else {
        None
    };
    PointCloud::new(Tensor::new(vec![m, 3], pos)?, colors)
}

/// Reads either format, detected from the magic bytes.
pub fn read_point_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(DESTPC_MAGIC) {
        decode_destpc(&bytes)
    } else {
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Format(format!("{} is neither DESTPC1 nor text", path.display())))?;
        decode_text(&text)
    }
}

/// Binary for a `.destpc` extension, text otherwise.
pub fn write_point_cloud(path: &Path, pc: &PointCloud) -> Result<()> {
    let binary = path.extension().is_some_and(|e| e == "destpc");
    let bytes = if binary {
        encode_destpc(pc)?
    } else {
        encode_text(pc).into_bytes()
    };
    atomic_write(path, &bytes)
}

/// Writes through a temporary file in the same directory, then renames.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// `<path>.gt.json`.
pub fn gt_sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".gt.json");
    PathBuf::from(s)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GtFile {
    boxes: Vec<Box3D>,
}

pub fn write_gt_boxes(path: &Path, boxes: &[Box3D]) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(&GtFile {
        boxes: boxes.to_vec(),
    })?;
    json.push(b'\n');
    atomic_write(path, &json)
}

pub fn read_gt_boxes(path: &Path) -> Result<Vec<Box3D>> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str::<GtFile>(&text)?.boxes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    /// Empty for scalars.
    pub shape: Vec<usize>,
    pub dtype: DType,
    /// Byte offset into the data file.
    pub offset: usize,
}

/// JSON manifest describing a flat little-endian data file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightManifest {
    pub tensors: Vec<ManifestEntry>,
    pub total_bytes: usize,
}

struct Exporter {
    data: Vec<u8>,
    entries: Vec<ManifestEntry>,
}

impl Exporter {
    fn push(&mut self, name: &str, shape: Vec<usize>, values: &[f64]) {
        self.entries.push(ManifestEntry {
            name: name.to_string(),
            shape,
            dtype: DType::F64,
            offset: self.data.len(),
        });
        for v in values {
            self.data.extend_from_slice(&v.to_le_bytes());
        }
    }
}

impl ParamVisitor for Exporter {
    fn tensor(&mut self, name: &str, t: &mut Tensor) {
        self.push(name, t.shape().to_vec(), t.data());
    }

    fn scalar(&mut self, name: &str, v: &mut f64) {
        self.push(name, Vec::new(), &[*v]);
    }
}

/// Flattens `w` into `(data, manifest)`.
pub fn export_weights(w: &mut dyn Parameters) -> (Vec<u8>, WeightManifest) {
    let mut ex = Exporter {
        data: Vec::new(),
        entries: Vec::new(),
    };
    w.visit("", &mut ex);
    let manifest = WeightManifest {
        total_bytes: ex.data.len(),
        tensors: ex.entries,
    };
    (ex.data, manifest)
}

struct Importer<'a> {
    data: &'a [u8],
    index: HashMap<&'a str, &'a ManifestEntry>,
    error: Option<Error>,
}

impl Importer<'_> {
    fn values(&mut self, name: &str, shape: &[usize]) -> Option<Vec<f64>> {
        if self.error.is_some() {
            return None;
        }
        let found = match self.index.get(name) {
            None => Err(Error::Format(format!("weights file has no entry '{name}'"))),
            Some(e) if e.shape != shape => Err(Error::Format(format!(
                "'{name}' has shape {:?}, expected {shape:?}",
                e.shape
            ))),
            Some(e) if e.dtype != DType::F64 => {
                Err(Error::Format(format!("'{name}' is not f64")))
            }
            Some(e) => {
                let n: usize = shape.iter().product();
                let end = e.offset + 8 * n;
                if end > self.data.len() {
                    Err(Error::Format(format!("'{name}' runs past the data file")))
                } else {
                    let vals: Vec<f64> = self.data[e.offset..end]
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    if vals.iter().all(|v| v.is_finite()) {
                        Ok(vals)
                    } else {
                        Err(Error::NonFinite(name.to_string()))
                    }
                }
            }
        };
        match found {
            Ok(v) => Some(v),
            Err(e) => {
                self.error = Some(e);
                None
            }
        }
    }
}

impl ParamVisitor for Importer<'_> {
    fn tensor(&mut self, name: &str, t: &mut Tensor) {
        let shape = t.shape().to_vec();
        if let Some(v) = self.values(name, &shape) {
            t.data_mut().copy_from_slice(&v);
        }
    }

    fn scalar(&mut self, name: &str, v: &mut f64) {
        if let Some(vals) = self.values(name, &[]) {
            *v = vals[0];
        }
    }
}

struct Counting<'b, 'a>(&'b mut Importer<'a>, &'b mut usize);

impl ParamVisitor for Counting<'_, '_> {
    fn tensor(&mut self, name: &str, t: &mut Tensor) {
        *self.1 += 1;
        self.0.tensor(name, t);
    }

    fn scalar(&mut self, name: &str, v: &mut f64) {
        *self.1 += 1;
        self.0.scalar(name, v);
    }
}

/// Overwrites every parameter of `w` from `(data, manifest)`. Shapes must
/// match exactly; extra manifest entries are an error.
pub fn import_weights(w: &mut dyn Parameters, data: &[u8], manifest: &WeightManifest) -> Result<()> {
    if manifest.total_bytes != data.len() {
        return Err(Error::Format(format!(
            "manifest expects {} bytes, data has {}",
            manifest.total_bytes,
            data.len()
        )));
    }
    let index: HashMap<&str, &ManifestEntry> =
        manifest.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    if index.len() != manifest.tensors.len() {
        return Err(Error::Format("duplicate names in weight manifest".into()));
    }
    let mut im = Importer {
        data,
        index,
        error: None,
    };
    let mut visited = 0usize;
    w.visit("", &mut Counting(&mut im, &mut visited));
    if let Some(e) = im.error.take() {
        return Err(e);
    }
    if visited != manifest.tensors.len() {
        return Err(Error::Format(format!(
            "manifest has {} entries, model has {visited}",
            manifest.tensors.len()
        )));
    }
    Ok(())
}

/// Writes `<prefix>.bin` and `<prefix>.json`.
pub fn save_weights(prefix: &Path, w: &mut dyn Parameters) -> Result<()> {
    let (data, manifest) = export_weights(w);
    atomic_write(&with_suffix(prefix, ".bin"), &data)?;
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    atomic_write(&with_suffix(prefix, ".json"), &json)
}

pub fn load_weights(prefix: &Path, w: &mut dyn Parameters) -> Result<()> {
    let data = fs::read(with_suffix(prefix, ".bin"))?;
    let manifest: WeightManifest =
        serde_json::from_str(&fs::read_to_string(with_suffix(prefix, ".json"))?)?;
    import_weights(w, &data, &manifest)
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}
