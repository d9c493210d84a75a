//! Volumes, label maps, normalization, affine resampling and the raw volume
//! store.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::warp::DeformationGrid;

/// Voxel lattice dimensions `(D, H, W)`, C order (last axis fastest).
pub type Shape = [usize; 3];

pub fn voxel_count(shape: Shape) -> usize {
    shape[0] * shape[1] * shape[2]
}

#[inline]
pub fn flat_index(shape: Shape, i: usize, j: usize, k: usize) -> usize {
    (i * shape[1] + j) * shape[2] + k
}

fn check_shape(shape: Shape) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::InvalidInput(format!("shape {shape:?} has a zero extent")));
    }
    Ok(())
}

/// A 3D scalar intensity field.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: Shape,
    data: Vec<f32>,
    spacing: [f32; 3],
}

impl Volume {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        check_shape(shape)?;
        if data.len() != voxel_count(shape) {
            return Err(Error::shape(voxel_count(shape), data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("volume contains non-finite values".into()));
        }
        Ok(Self {
            shape,
            data,
            spacing: [1.0; 3],
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; voxel_count(shape)],
            spacing: [1.0; 3],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(voxel_count(shape));
        for i in 0..shape[0] {
            for j in 0..shape[1] {
                for k in 0..shape[2] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(shape, data)
    }

    pub fn from_f64(shape: Shape, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[flat_index(self.shape, i, j, k)]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

/// Integer label field; label 0 is background, `1..=num_labels` foreground.
#[derive(Clone, Debug, PartialEq)]
pub struct SegMap {
    shape: Shape,
    labels: Vec<u8>,
    num_labels: u8,
}

impl SegMap {
    pub fn new(shape: Shape, labels: Vec<u8>, num_labels: u8) -> Result<Self> {
        check_shape(shape)?;
        if labels.len() != voxel_count(shape) {
            return Err(Error::shape(voxel_count(shape), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > num_labels) {
            return Err(Error::InvalidInput(format!("label {bad} outside 0..={num_labels}")));
        }
        Ok(Self {
            shape,
            labels,
            num_labels,
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn num_labels(&self) -> u8 {
        self.num_labels
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> u8 {
        self.labels[flat_index(self.shape, i, j, k)]
    }

    /// Foreground one-hot encoding, channel-major: channel `l - 1` holds label `l`.
    pub fn one_hot(&self) -> Vec<f64> {
        let n = self.labels.len();
        let mut out = vec![0.0; self.num_labels as usize * n];
        for (idx, &l) in self.labels.iter().enumerate() {
            if l > 0 {
                out[(l as usize - 1) * n + idx] = 1.0;
            }
        }
        out
    }

    /// Hard labels from soft foreground channels; background probability is
    /// `1 - sum(foreground)`. Ties resolve to the lowest label.
    pub fn from_soft(shape: Shape, soft: &[f64], num_labels: u8) -> Result<Self> {
        let n = voxel_count(shape);
        if soft.len() != n * num_labels as usize {
            return Err(Error::shape(n * num_labels as usize, soft.len()));
        }
        let labels = (0..n)
            .map(|idx| {
                let fg: f64 = (0..num_labels as usize).map(|c| soft[c * n + idx]).sum();
                let mut best = (0u8, 1.0 - fg);
                for c in 0..num_labels as usize {
                    let p = soft[c * n + idx];
                    if p > best.1 {
                        best = (c as u8 + 1, p);
                    }
                }
                best.0
            })
            .collect();
        Self::new(shape, labels, num_labels)
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Mean voxel coordinate of `label`, `None` when the label is absent.
    pub fn centroid(&self, label: u8) -> Option<[f64; 3]> {
        let mut acc = [0.0; 3];
        let mut count = 0usize;
        for i in 0..self.shape[0] {
            for j in 0..self.shape[1] {
                for k in 0..self.shape[2] {
                    if self.get(i, j, k) == label {
                        acc[0] += i as f64;
                        acc[1] += j as f64;
                        acc[2] += k as f64;
                        count += 1;
                    }
                }
            }
        }
        (count > 0).then(|| acc.map(|a| a / count as f64))
    }
}

/// Hard Dice overlap averaged over foreground labels. A label absent from both
/// maps counts as perfect agreement.
pub fn dice_per_label(a: &SegMap, b: &SegMap) -> Result<Vec<f64>> {
    if a.shape != b.shape {
        return Err(Error::shape(a.shape, b.shape));
    }
    let labels = a.num_labels.max(b.num_labels);
    Ok((1..=labels)
        .map(|l| {
            let (mut inter, mut sa, mut sb) = (0usize, 0usize, 0usize);
            for (&x, &y) in a.labels.iter().zip(&b.labels) {
                let (ia, ib) = (x == l, y == l);
                inter += (ia && ib) as usize;
                sa += ia as usize;
                sb += ib as usize;
            }
            if sa + sb == 0 {
                1.0
            } else {
                2.0 * inter as f64 / (sa + sb) as f64
            }
        })
        .collect())
}

pub fn dice_score(a: &SegMap, b: &SegMap) -> Result<f64> {
    let per = dice_per_label(a, b)?;
    if per.is_empty() {
        return Ok(1.0);
    }
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Result of [`normalize_volume_report`].
#[derive(Clone, Debug)]
pub struct Normalized {
    pub volume: Volume,
    /// Set when the input had zero spread and the output was forced to zero.
    pub degenerate: bool,
}

/// z-score, clip to `[-5, 5]`, then min-max rescale to `[0, 1]`.
pub fn normalize_volume(v: &Volume) -> Volume {
    let out = normalize_volume_report(v);
    if out.degenerate {
        log::warn!("normalize_volume: degenerate input, returning all zeros");
    }
    out.volume
}

pub fn normalize_volume_report(v: &Volume) -> Normalized {
    let n = v.data.len() as f64;
    let mean = v.data.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.data.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let degenerate = |v: &Volume| Normalized {
        volume: Volume::zeros(v.shape).with_spacing(v.spacing),
        degenerate: true,
    };
    if std == 0.0 || !std.is_finite() {
        return degenerate(v);
    }
    let z: Vec<f64> = v
        .data
        .iter()
        .map(|&x| ((x as f64 - mean) / std).clamp(-5.0, 5.0))
        .collect();
    let lo = z.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return degenerate(v);
    }
    let data = z.iter().map(|&x| ((x - lo) / (hi - lo)) as f32).collect();
    Normalized {
        volume: Volume {
            shape: v.shape,
            data,
            spacing: v.spacing,
        },
        degenerate: false,
    }
}

/// Identity sampling grid: channel `c` holds the voxel coordinate along axis `c`.
pub fn make_identity_grid(shape: Shape) -> Result<DeformationGrid> {
    check_shape(shape)?;
    let n = voxel_count(shape);
    let mut phi = vec![0.0; 3 * n];
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            for k in 0..shape[2] {
                let idx = flat_index(shape, i, j, k);
                phi[idx] = i as f64;
                phi[n + idx] = j as f64;
                phi[2 * n + idx] = k as f64;
            }
        }
    }
    DeformationGrid::new(shape, phi)
}

pub type IdentityGrid = DeformationGrid;

/// Interpolation used by [`apply_affine`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    Linear,
    Nearest,
}

/// Homogeneous 4x4 map from input voxel coordinates to output voxel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine(pub Matrix4<f64>);

impl Affine {
    pub fn identity() -> Self {
        Affine(Matrix4::identity())
    }

    pub fn from_rows(rows: [[f64; 4]; 4]) -> Self {
        Affine(Matrix4::from_fn(|r, c| rows[r][c]))
    }

    pub fn to_rows(&self) -> [[f64; 4]; 4] {
        let mut rows = [[0.0; 4]; 4];
        for (r, row) in rows.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.0[(r, c)];
            }
        }
        rows
    }

    pub fn translation(t: [f64; 3]) -> Self {
        let mut m = Matrix4::identity();
        for a in 0..3 {
            m[(a, 3)] = t[a];
        }
        Affine(m)
    }

    /// Geometric center of a lattice.
    pub fn center_of(shape: Shape) -> [f64; 3] {
        shape.map(|s| (s as f64 - 1.0) / 2.0)
    }

    fn about_center(linear: Matrix4<f64>, center: [f64; 3]) -> Self {
        let to = Affine::translation(center).0;
        let from = Affine::translation(center.map(|c| -c)).0;
        Affine(to * linear * from)
    }

    /// Rotation by `degrees` about `axis`, centred at `center`. A rotation
    /// about axis 0 turns axis 1 towards axis 2.
    pub fn rotation(axis: usize, degrees: f64, center: [f64; 3]) -> Self {
        let (s, c) = degrees.to_radians().sin_cos();
        let (p, q) = match axis {
            0 => (1, 2),
            1 => (2, 0),
            _ => (0, 1),
        };
        let mut m = Matrix4::identity();
        m[(p, p)] = c;
        m[(p, q)] = -s;
        m[(q, p)] = s;
        m[(q, q)] = c;
        Self::about_center(m, center)
    }

    /// Isotropic zoom by `factor` (> 1 enlarges) about `center`.
    pub fn scaling(factor: f64, center: [f64; 3]) -> Self {
        let mut m = Matrix4::identity();
        for a in 0..3 {
            m[(a, a)] = factor;
        }
        Self::about_center(m, center)
    }

    /// Mirror along `axis` of a lattice with `shape`.
    pub fn flip(axis: usize, shape: Shape) -> Self {
        let mut m = Matrix4::identity();
        m[(axis, axis)] = -1.0;
        m[(axis, 3)] = shape[axis] as f64 - 1.0;
        Affine(m)
    }

    /// `self` applied after `first`.
    pub fn compose(&self, first: &Affine) -> Affine {
        Affine(self.0 * first.0)
    }

    pub fn inverse(&self) -> Result<Affine> {
        if self.0.determinant().abs() < 1e-12 {
            return Err(Error::SingularMatrix);
        }
        self.0.try_inverse().map(Affine).ok_or(Error::SingularMatrix)
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.0 * Vector4::new(p[0], p[1], p[2], 1.0);
        [v[0], v[1], v[2]]
    }
}

fn snap(c: f64) -> f64 {
    let r = c.round();
    if (c - r).abs() < 1e-9 {
        r
    } else {
        c
    }
}

/// Trilinear sample of `data` at voxel coordinate `p` with border clamping.
pub fn sample_linear<T: Copy + Into<f64>>(data: &[T], shape: Shape, p: [f64; 3]) -> f64 {
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let hi = shape[a] as f64 - 1.0;
        let c = p[a].clamp(0.0, hi);
        if shape[a] == 1 {
            base[a] = 0;
            frac[a] = 0.0;
            continue;
        }
        let f = c.floor().min(hi - 1.0);
        base[a] = f as usize;
        frac[a] = c - f;
    }
    let mut acc = 0.0;
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let bit = (corner >> (2 - a)) & 1;
            if bit == 1 {
                if frac[a] == 0.0 {
                    w = 0.0;
                    break;
                }
                w *= frac[a];
                idx[a] = base[a] + 1;
            } else {
                w *= 1.0 - frac[a];
                idx[a] = base[a];
            }
        }
        if w != 0.0 {
            acc += w * data[flat_index(shape, idx[0], idx[1], idx[2])].into();
        }
    }
    acc
}

fn sample_nearest<T: Copy>(data: &[T], shape: Shape, p: [f64; 3]) -> T {
    let idx = [0, 1, 2].map(|a| p[a].round().clamp(0.0, shape[a] as f64 - 1.0) as usize);
    data[flat_index(shape, idx[0], idx[1], idx[2])]
}

fn resample<U>(shape: Shape, affine: &Affine, mut f: impl FnMut([f64; 3]) -> U) -> Result<Vec<U>> {
    let inv = affine.inverse()?;
    let mut out = Vec::with_capacity(voxel_count(shape));
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            for k in 0..shape[2] {
                let p = inv.apply([i as f64, j as f64, k as f64]).map(snap);
                out.push(f(p));
            }
        }
    }
    Ok(out)
}

/// Resample a volume under `affine` (input → output voxel coordinates).
pub fn apply_affine(v: &Volume, affine: &Affine, interp: Interp) -> Result<Volume> {
    let data = resample(v.shape, affine, |p| match interp {
        Interp::Linear => sample_linear(&v.data, v.shape, p) as f32,
        Interp::Nearest => sample_nearest(&v.data, v.shape, p),
    })?;
    Ok(Volume {
        shape: v.shape,
        data,
        spacing: v.spacing,
    })
}

/// Label maps are always resampled with nearest neighbour.
pub fn apply_affine_seg(s: &SegMap, affine: &Affine) -> Result<SegMap> {
    let labels = resample(s.shape, affine, |p| sample_nearest(&s.labels, s.shape, p))?;
    Ok(SegMap {
        shape: s.shape,
        labels,
        num_labels: s.num_labels,
    })
}

// ---------------------------------------------------------------------------
// Volume store
// ---------------------------------------------------------------------------

/// Contents of `meta.json` in a store directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawMeta {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub spacing: [f32; 3],
    pub byte_order: String,
    pub order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_labels: Option<u8>,
}

const META_FILE: &str = "meta.json";
const DATA_FILE: &str = "data.raw";

fn write_raw(dir: &Path, meta: &RawMeta, bytes: &[u8]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(META_FILE), serde_json::to_vec_pretty(meta)?)?;
    fs::write(dir.join(DATA_FILE), bytes)?;
    Ok(())
}

fn read_raw(dir: &Path) -> Result<(RawMeta, Vec<u8>)> {
    let meta_path = dir.join(META_FILE);
    let data_path = dir.join(DATA_FILE);
    for p in [&meta_path, &data_path] {
        if !p.exists() {
            return Err(Error::MissingFile(p.clone()));
        }
    }
    let meta: RawMeta =
        serde_json::from_slice(&fs::read(&meta_path)?).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    if meta.byte_order != "little" || meta.order != "C" {
        return Err(Error::format(
            &meta_path,
            "only little-endian C-order data is supported",
        ));
    }
    let bytes = fs::read(&data_path)?;
    let width = match meta.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        "u8" => 1,
        other => return Err(Error::format(&meta_path, format!("unknown dtype {other}"))),
    };
    let expected = meta.shape.iter().product::<usize>() * width;
    if meta.shape.is_empty() || bytes.len() != expected {
        return Err(Error::format(
            &data_path,
            format!(
                "expected {expected} bytes for shape {:?}, found {}",
                meta.shape,
                bytes.len()
            ),
        ));
    }
    Ok((meta, bytes))
}

fn shape3(meta: &RawMeta, path: &Path) -> Result<Shape> {
    match meta.shape[..] {
        [d, h, w] if d > 0 && h > 0 && w > 0 => Ok([d, h, w]),
        _ => Err(Error::format(
            path,
            format!("expected a 3D shape, got {:?}", meta.shape),
        )),
    }
}

pub fn save_volume(dir: &Path, v: &Volume) -> Result<()> {
    let meta = RawMeta {
        shape: v.shape.to_vec(),
        dtype: "f32".into(),
        spacing: v.spacing,
        byte_order: "little".into(),
        order: "C".into(),
        num_labels: None,
    };
    let bytes: Vec<u8> = v.data.iter().flat_map(|x| x.to_le_bytes()).collect();
    write_raw(dir, &meta, &bytes)
}

pub fn load_volume(dir: &Path) -> Result<Volume> {
    let (meta, bytes) = read_raw(dir)?;
    let shape = shape3(&meta, dir)?;
    if meta.dtype != "f32" {
        return Err(Error::format(
            dir,
            format!("volume dtype must be f32, got {}", meta.dtype),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(shape, data)
        .map(|v| v.with_spacing(meta.spacing))
        .map_err(|e| Error::format(dir, e.to_string()))
}

pub fn save_segmap(dir: &Path, s: &SegMap) -> Result<()> {
    let meta = RawMeta {
        shape: s.shape.to_vec(),
        dtype: "u8".into(),
        spacing: [1.0; 3],
        byte_order: "little".into(),
        order: "C".into(),
        num_labels: Some(s.num_labels),
    };
    write_raw(dir, &meta, &s.labels)
}

pub fn load_segmap(dir: &Path) -> Result<SegMap> {
    let (meta, bytes) = read_raw(dir)?;
    let shape = shape3(&meta, dir)?;
    if meta.dtype != "u8" {
        return Err(Error::format(
            dir,
            format!("segmentation dtype must be u8, got {}", meta.dtype),
        ));
    }
    let num_labels = meta
        .num_labels
        .ok_or_else(|| Error::format(dir, "segmentation meta lacks num_labels"))?;
    SegMap::new(shape, bytes, num_labels).map_err(|e| Error::format(dir, e.to_string()))
}

/// Stores a deformation grid as a `(3, D, H, W)` f64 array.
pub fn save_grid(dir: &Path, g: &DeformationGrid) -> Result<()> {
    let s = g.shape();
    let meta = RawMeta {
        shape: vec![3, s[0], s[1], s[2]],
        dtype: "f64".into(),
        spacing: [1.0; 3],
        byte_order: "little".into(),
        order: "C".into(),
        num_labels: None,
    };
    let bytes: Vec<u8> = g.phi().iter().flat_map(|x| x.to_le_bytes()).collect();
    write_raw(dir, &meta, &bytes)
}

pub fn load_grid(dir: &Path) -> Result<DeformationGrid> {
    let (meta, bytes) = read_raw(dir)?;
    let shape = match meta.shape[..] {
        [3, d, h, w] if meta.dtype == "f64" => [d, h, w],
        _ => return Err(Error::format(dir, "expected f64 array of shape (3, D, H, W)")),
    };
    let phi = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    DeformationGrid::new(shape, phi)
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub volume_path: PathBuf,
    pub seg_path: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub subjects: Vec<SubjectEntry>,
    /// Directory that relative paths resolve against; not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn split(&self, split: Split) -> Vec<&SubjectEntry> {
        self.subjects.iter().filter(|s| s.split == split).collect()
    }

    pub fn get(&self, id: &str) -> Option<&SubjectEntry> {
        self.subjects.iter().find(|s| s.id == id)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn load_subject(&self, entry: &SubjectEntry) -> Result<(Volume, SegMap)> {
        let v = load_volume(&self.resolve(&entry.volume_path))?;
        let s = load_segmap(&self.resolve(&entry.seg_path))?;
        if v.shape() != s.shape() {
            return Err(Error::shape(v.shape(), s.shape()));
        }
        Ok((v, s))
    }

    /// Loads a subject and normalizes its intensities; this is how every
    /// pipeline stage feeds volumes to the network.
    pub fn load_normalized(&self, entry: &SubjectEntry) -> Result<(Volume, SegMap)> {
        let (v, s) = self.load_subject(entry)?;
        Ok((normalize_volume(&v), s))
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in &self.subjects {
            if !seen.insert(&s.id) {
                return Err(Error::InvalidInput(format!("duplicate subject id {}", s.id)));
            }
            for p in [&s.volume_path, &s.seg_path] {
                let full = self.resolve(p);
                if !full.exists() {
                    return Err(Error::MissingFile(full));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// Reads `manifest.json` from a directory (or a direct file path) and
    /// checks ids and referenced files.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        if !file.exists() {
            return Err(Error::MissingFile(file));
        }
        let mut m: DatasetManifest =
            serde_json::from_slice(&fs::read(&file)?).map_err(|e| Error::format(&file, e.to_string()))?;
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }
}
