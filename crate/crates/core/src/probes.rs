//! Interpretability experiments on a trained model and its latent basis:
//! affine-perturbation probes, λ-sweeps with contour overlays, the
//! skip-connection comparison and PCA computed directly on deformation
//! fields.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::contour::{slice_contours, to_pgm, volume_slice, Contour, Role, PLANES};
use crate::error::{Error, Result};
use crate::latent::{decode_component, fit_pca_rows, PcaBasis};
use crate::regnet::RegNet;
use crate::volgrid::{apply_affine, Affine, DatasetManifest, Interp, SegMap, Shape, Split, Volume};
use crate::warp::{jacobian_determinant_map, warp_segmentation, warp_trilinear, DeformationGrid};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ProbeTransform {
    Identity,
    Translation {
        axis: usize,
        voxels: f64,
    },
    Rotation {
        axis: usize,
        degrees: f64,
    },
    /// Zoom by `1 + factor` about the volume centre.
    Scaling {
        factor: f64,
    },
}

const AXES: [&str; 3] = ["z", "y", "x"];

fn parse_axis(s: &str) -> Result<usize> {
    match s {
        "z" | "0" => Ok(0),
        "y" | "1" => Ok(1),
        "x" | "2" => Ok(2),
        _ => Err(Error::InvalidInput(format!("unknown axis '{s}' (expected z, y or x)"))),
    }
}

fn parse_num(s: &str) -> Result<f64> {
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::InvalidInput(format!("invalid number '{s}'")))
}

impl FromStr for ProbeTransform {
    type Err = Error;

    /// `identity`, `translation[:axis[:voxels]]`, `rotation[:axis[:degrees]]`,
    /// `scaling[:factor]`; omitted parts default to z / 10 voxels, z / 20°
    /// and 0.2.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::InvalidInput(format!("invalid probe transform '{s}'"));
        match parts.as_slice() {
            ["identity"] => Ok(Self::Identity),
            ["translation", rest @ ..] if rest.len() <= 2 => Ok(Self::Translation {
                axis: rest.first().map_or(Ok(0), |a| parse_axis(a))?,
                voxels: rest.get(1).map_or(Ok(10.0), |v| parse_num(v))?,
            }),
            ["rotation", rest @ ..] if rest.len() <= 2 => Ok(Self::Rotation {
                axis: rest.first().map_or(Ok(0), |a| parse_axis(a))?,
                degrees: rest.get(1).map_or(Ok(20.0), |v| parse_num(v))?,
            }),
            ["scaling", rest @ ..] if rest.len() <= 1 => {
                let factor = rest.first().map_or(Ok(0.2), |v| parse_num(v))?;
                if factor <= -1.0 {
                    return Err(Error::InvalidInput("scaling factor must exceed -1".into()));
                }
                Ok(Self::Scaling { factor })
            }
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for ProbeTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::Identity => write!(f, "identity"),
            Self::Translation { axis, voxels } => write!(f, "translation:{}:{voxels}", AXES[axis]),
            Self::Rotation { axis, degrees } => write!(f, "rotation:{}:{degrees}", AXES[axis]),
            Self::Scaling { factor } => write!(f, "scaling:{factor}"),
        }
    }
}

impl ProbeTransform {
    pub fn affine(&self, shape: Shape) -> Affine {
        let c = Affine::center_of(shape);
        match *self {
            Self::Identity => Affine::identity(),
            Self::Translation { axis, voxels } => {
                let mut t = [0.0; 3];
                t[axis] = voxels;
                Affine::translation(t)
            }
            Self::Rotation { axis, degrees } => Affine::rotation(axis, degrees, c),
            Self::Scaling { factor } => Affine::scaling(1.0 + factor, c),
        }
    }

    /// Filesystem-safe name, e.g. `translation_z_10`.
    pub fn file_stem(&self) -> String {
        self.to_string().replace(':', "_")
    }

    /// Name of the CSV a probe run writes into its output directory.
    pub fn csv_name(&self) -> String {
        format!("probe_{}.csv", self.file_stem())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeSpec {
    pub transform: ProbeTransform,
    pub split: Split,
}

impl ProbeSpec {
    pub fn new(transform: ProbeTransform) -> Self {
        Self {
            transform,
            split: Split::Val,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentSummary {
    /// 1-based component index.
    pub component: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
}

/// Per-subject, per-component absolute coefficient changes.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub transform: String,
    /// Sorted subject ids.
    pub subjects: Vec<String>,
    /// `deltas[s][j]` for subject `s` and component `j + 1`.
    pub deltas: Vec<Vec<f64>>,
}

pub const PROBE_CSV_HEADER: &str = "transform,subject,component,abs_delta";

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl ProbeResult {
    pub fn k(&self) -> usize {
        self.deltas.first().map_or(0, Vec::len)
    }

    pub fn summary(&self) -> Vec<ComponentSummary> {
        (0..self.k())
            .map(|j| {
                let mut v: Vec<f64> = self.deltas.iter().map(|d| d[j]).collect();
                v.sort_by(f64::total_cmp);
                ComponentSummary {
                    component: j + 1,
                    median: quantile(&v, 0.5),
                    q1: quantile(&v, 0.25),
                    q3: quantile(&v, 0.75),
                    min: v[0],
                    max: v[v.len() - 1],
                }
            })
            .collect()
    }

    /// Largest component median over the sum of medians (0 when every
    /// median is 0).
    pub fn dominance_ratio(&self) -> f64 {
        let med: Vec<f64> = self.summary().iter().map(|s| s.median).collect();
        let sum: f64 = med.iter().sum();
        if sum > 0.0 {
            med.iter().cloned().fold(0.0, f64::max) / sum
        } else {
            0.0
        }
    }

    /// Number of components whose median exceeds 10% of the largest median.
    pub fn activation_count(&self) -> usize {
        let med: Vec<f64> = self.summary().iter().map(|s| s.median).collect();
        let top = med.iter().cloned().fold(0.0, f64::max);
        med.iter().filter(|&&m| m > 0.1 * top).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{PROBE_CSV_HEADER}\n");
        for (s, d) in self.subjects.iter().zip(&self.deltas) {
            for (j, v) in d.iter().enumerate() {
                out.push_str(&format!("{},{s},{},{v}\n", self.transform, j + 1));
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |r: String| Error::InvalidInput(format!("probe csv: {r}"));
        let mut lines = text.lines();
        if lines.next() != Some(PROBE_CSV_HEADER) {
            return Err(bad("unexpected header".into()));
        }
        let mut transform = None;
        let mut subjects: Vec<String> = Vec::new();
        let mut deltas: Vec<Vec<f64>> = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad(format!("line {}: expected 4 fields", n + 2)));
            }
            if *transform.get_or_insert_with(|| f[0].to_string()) != f[0] {
                return Err(bad("mixed transforms".into()));
            }
            let j: usize = f[2].parse().map_err(|_| bad(format!("line {}: component", n + 2)))?;
            let v: f64 = f[3].parse().map_err(|_| bad(format!("line {}: value", n + 2)))?;
            if subjects.last().map(String::as_str) != Some(f[1]) {
                subjects.push(f[1].to_string());
                deltas.push(Vec::new());
            }
            let d = deltas.last_mut().unwrap();
            if j != d.len() + 1 {
                return Err(bad(format!("line {}: components out of order", n + 2)));
            }
            d.push(v);
        }
        let transform = transform.ok_or_else(|| bad("no rows".into()))?;
        if deltas.iter().any(|d| d.len() != deltas[0].len()) {
            return Err(bad("ragged component counts".into()));
        }
        Ok(Self {
            transform,
            subjects,
            deltas,
        })
    }
}

/// Compact summary served over the API.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub transform: String,
    pub k: usize,
    pub n_subjects: usize,
    pub components: Vec<ComponentSummary>,
    pub dominance_ratio: f64,
    pub activation_count: usize,
}

impl From<&ProbeResult> for ProbeSummary {
    fn from(r: &ProbeResult) -> Self {
        Self {
            transform: r.transform.clone(),
            k: r.k(),
            n_subjects: r.subjects.len(),
            components: r.summary(),
            dominance_ratio: r.dominance_ratio(),
            activation_count: r.activation_count(),
        }
    }
}

/// Projects every subject of the split before and after the transform and
/// records `|a_j(X) - a_j(X')|`.
pub fn affine_perturbation_probe(
    net: &RegNet,
    basis: &PcaBasis,
    manifest: &DatasetManifest,
    spec: &ProbeSpec,
) -> Result<ProbeResult> {
    basis.check_model(net)?;
    let mut entries = manifest.split(spec.split);
    if entries.is_empty() {
        return Err(Error::InvalidInput(format!("split {:?} is empty", spec.split)));
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    let affine = spec.transform.affine(net.arch().in_shape);
    let mut subjects = Vec::with_capacity(entries.len());
    let mut deltas = Vec::with_capacity(entries.len());
    for e in entries {
        let (x, _) = manifest.load_normalized(e)?;
        let xp = apply_affine(&x, &affine, Interp::Linear)?;
        let a = basis.project(net.encode(&x)?.flat())?;
        let ap = basis.project(net.encode(&xp)?.flat())?;
        subjects.push(e.id.clone());
        deltas.push(a.iter().zip(&ap).map(|(p, q)| (p - q).abs()).collect());
    }
    Ok(ProbeResult {
        transform: spec.transform.to_string(),
        subjects,
        deltas,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianStats {
    pub min_det: f64,
    pub fold_fraction: f64,
}

/// One warped slice with both contour roles.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformedSlice {
    pub pgm: Vec<u8>,
    pub contours_original: Vec<Contour>,
    pub contours_deformed: Vec<Contour>,
}

/// A subject deformed by one grid, ready for slicing.
pub struct DeformedSubject {
    pub original_seg: SegMap,
    pub warped: Volume,
    pub warped_seg: SegMap,
    pub jacobian: JacobianStats,
}

impl DeformedSubject {
    pub fn new(volume: &Volume, seg: &SegMap, grid: &DeformationGrid) -> Result<Self> {
        let warped = warp_trilinear(volume, grid)?;
        let soft = warp_segmentation(seg, grid)?;
        let warped_seg = SegMap::from_soft(seg.shape(), &soft, seg.num_labels())?;
        let jac = jacobian_determinant_map(grid)?;
        Ok(Self {
            original_seg: seg.clone(),
            warped,
            warped_seg,
            jacobian: JacobianStats {
                min_det: jac.min_det(),
                fold_fraction: jac.fold_fraction(),
            },
        })
    }

    pub fn slice(&self, axis: usize, index: usize) -> Result<DeformedSlice> {
        Ok(DeformedSlice {
            pgm: to_pgm(&volume_slice(&self.warped, axis, index)?),
            contours_original: slice_contours(&self.original_seg, axis, index, Role::Original)?,
            contours_deformed: slice_contours(&self.warped_seg, axis, index, Role::Deformed)?,
        })
    }
}

/// Centre slice index along `axis`.
pub fn mid_slice(shape: Shape, axis: usize) -> usize {
    shape[axis] / 2
}

/// Files written by [`lambda_sweep`].
#[derive(Clone, Debug, Default)]
pub struct SweepOutput {
    pub images: Vec<PathBuf>,
    pub contours: Vec<PathBuf>,
}

pub fn sweep_stem(j: usize, lambda: f64, axis: usize) -> String {
    format!("c{j}_l{lambda}_{}", PLANES[axis])
}

/// Decodes `λ u_j` for every λ, warps `subject` and writes the three centre
/// slices to `out_dir/images/*.pgm` with contours in
/// `out_dir/contours/*.json`.
pub fn lambda_sweep(
    net: &RegNet,
    basis: &PcaBasis,
    manifest: &DatasetManifest,
    subject: &str,
    j: usize,
    lambdas: &[f64],
    out_dir: &Path,
) -> Result<SweepOutput> {
    let entry = manifest
        .get(subject)
        .ok_or_else(|| Error::InvalidInput(format!("unknown subject '{subject}'")))?;
    let (volume, seg) = manifest.load_normalized(entry)?;
    let (img_dir, ctr_dir) = (out_dir.join("images"), out_dir.join("contours"));
    fs::create_dir_all(&img_dir)?;
    fs::create_dir_all(&ctr_dir)?;
    let mut out = SweepOutput::default();
    for &lambda in lambdas {
        let grid = decode_component(net, basis, j, lambda)?;
        let d = DeformedSubject::new(&volume, &seg, &grid)?;
        for axis in 0..3 {
            let s = d.slice(axis, mid_slice(volume.shape(), axis))?;
            let stem = sweep_stem(j, lambda, axis);
            let img = img_dir.join(format!("{stem}.pgm"));
            fs::write(&img, &s.pgm)?;
            let mut all = s.contours_original;
            all.extend(s.contours_deformed);
            let ctr = ctr_dir.join(format!("{stem}.json"));
            fs::write(&ctr, serde_json::to_vec(&all)?)?;
            out.images.push(img);
            out.contours.push(ctr);
        }
    }
    Ok(out)
}

/// Paired probe results of two models that differ only in skip connections.
#[derive(Clone, Debug)]
pub struct SkipComparison {
    pub noskip: ProbeResult,
    pub skip: ProbeResult,
}

pub const SKIP_CSV_HEADER: &str = "model,component,median,q1,q3,activated";

impl SkipComparison {
    pub fn activation_counts(&self) -> (usize, usize) {
        (self.noskip.activation_count(), self.skip.activation_count())
    }

    /// `2·K` summary rows, no-skip model first.
    pub fn summary_csv(&self) -> String {
        let mut out = format!("{SKIP_CSV_HEADER}\n");
        for (name, r) in [("noskip", &self.noskip), ("skip", &self.skip)] {
            let s = r.summary();
            let top = s.iter().map(|c| c.median).fold(0.0, f64::max);
            for c in s {
                out.push_str(&format!(
                    "{name},{},{},{},{},{}\n",
                    c.component,
                    c.median,
                    c.q1,
                    c.q3,
                    u8::from(c.median > 0.1 * top)
                ));
            }
        }
        out
    }

    pub fn report(&self) -> String {
        let (a, b) = self.activation_counts();
        format!(
            "{}: activated components without skips {a}/{}, with skips {b}/{}",
            self.noskip.transform,
            self.noskip.k(),
            self.skip.k()
        )
    }
}

pub fn skip_connection_comparison(
    noskip: (&RegNet, &PcaBasis),
    skip: (&RegNet, &PcaBasis),
    manifest: &DatasetManifest,
    spec: &ProbeSpec,
) -> Result<SkipComparison> {
    let mut a = noskip.0.arch().clone();
    let mut b = skip.0.arch().clone();
    a.skip_connections = false;
    b.skip_connections = false;
    if a != b {
        return Err(Error::InvalidInput(
            "models differ in more than the skip-connection flag".into(),
        ));
    }
    if noskip.1.k != skip.1.k {
        return Err(Error::InvalidInput("bases have different K".into()));
    }
    Ok(SkipComparison {
        noskip: affine_perturbation_probe(noskip.0, noskip.1, manifest, spec)?,
        skip: affine_perturbation_probe(skip.0, skip.1, manifest, spec)?,
    })
}

/// PCA computed on flattened forward increment fields instead of latents.
pub struct FieldPca {
    pub basis: PcaBasis,
    pub reference: String,
    pub subjects: Vec<String>,
}

/// Registers every other subject onto a fixed reference (the first
/// validation subject) and fits `k` components over the increment fields.
pub fn pca_on_fields(net: &RegNet, manifest: &DatasetManifest, k: usize, center: bool) -> Result<FieldPca> {
    let reference = manifest
        .split(Split::Val)
        .first()
        .copied()
        .ok_or_else(|| Error::InvalidInput("a validation subject is needed as the reference".into()))?;
    let (fv, _) = manifest.load_normalized(reference)?;
    let ef = net.encode_levels(&fv.to_f64())?;
    let mut rows = Vec::new();
    let mut subjects = Vec::new();
    for e in manifest.subjects.iter().filter(|e| e.id != reference.id) {
        let (mv, _) = manifest.load_normalized(e)?;
        let em = net.encode_levels(&mv.to_f64())?;
        rows.extend_from_slice(net.forward_increments_from(&em, &ef)?.inc());
        subjects.push(e.id.clone());
    }
    let dim = 3 * crate::volgrid::voxel_count(net.arch().in_shape);
    let basis = fit_pca_rows(&rows, subjects.len(), dim, k, center, &net.fingerprint())?;
    Ok(FieldPca {
        basis,
        reference: reference.id.clone(),
        subjects,
    })
}
