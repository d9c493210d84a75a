//! Synthetic 3D dataset: analytic soft-edged structures deformed by a random
//! affine and a smooth random warp per subject, with ground truth recorded.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::{save_segmap, save_volume, Affine, DatasetManifest, SegMap, Shape, Split, SubjectEntry, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureKind {
    Ellipsoid,
    Box,
}

/// One template structure. `radii` are semi-axes (ellipsoid) or half-widths
/// (box); label 0 contributes intensity only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Structure {
    pub kind: StructureKind,
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub intensity: f64,
    pub label: u8,
}

/// Ranges of the per-subject random affine: translation `±t` voxels and
/// rotation `±r` degrees per axis, isotropic scale in `[1 - s, 1 + s]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub translation: [f64; 3],
    pub rotation_deg: [f64; 3],
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub size: usize,
    pub n_subjects: usize,
    /// Trailing subjects assigned to the validation split.
    pub n_val: usize,
    pub structures: Vec<Structure>,
    pub jitter: Jitter,
    /// Peak displacement of the smooth warp, in voxels.
    pub smooth_warp_amplitude: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Control points per axis of the smooth warp.
pub const WARP_CONTROL_POINTS: usize = 4;
pub const TRUTH_FILE: &str = "truth.json";
/// Width of the soft structure edge, in voxels.
const EDGE: f64 = 0.5;

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: 32,
            n_subjects: 40,
            n_val: 8,
            structures: default_structures(32),
            jitter: Jitter {
                translation: [3.0, 3.0, 3.0],
                rotation_deg: [5.0, 5.0, 5.0],
                scale: 0.05,
            },
            smooth_warp_amplitude: 1.0,
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

/// Body ellipsoid with two lobes and a box, scaled to a cube of side `size`.
pub fn default_structures(size: usize) -> Vec<Structure> {
    let f = size as f64 / 32.0;
    let c = (size as f64 - 1.0) / 2.0;
    let s = |kind, center: [f64; 3], radii: [f64; 3], intensity, label| Structure {
        kind,
        center: center.map(|v| c + v * f),
        radii: radii.map(|v| v * f),
        intensity,
        label,
    };
    vec![
        s(StructureKind::Ellipsoid, [0.0, 0.0, 0.0], [8.5, 10.5, 10.5], 0.3, 0),
        s(StructureKind::Ellipsoid, [-2.5, 0.0, -5.0], [5.0, 5.0, 4.0], 0.8, 1),
        s(StructureKind::Ellipsoid, [-2.5, 0.0, 5.0], [5.0, 5.0, 4.0], 0.6, 2),
        s(StructureKind::Box, [5.0, 0.0, 0.0], [2.0, 3.0, 4.0], 1.0, 3),
    ]
}

impl PhantomSpec {
    /// Pure z-translation jitter of `±t` voxels and no smooth warp.
    pub fn translation_only(t: f64) -> Self {
        Self {
            jitter: Jitter {
                translation: [t, 0.0, 0.0],
                ..Jitter::default()
            },
            smooth_warp_amplitude: 0.0,
            ..Self::default()
        }
    }

    pub fn shape(&self) -> Shape {
        [self.size; 3]
    }

    pub fn num_labels(&self) -> u8 {
        self.structures.iter().map(|s| s.label).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 4 || self.n_subjects == 0 || self.n_val > self.n_subjects {
            return Err(Error::InvalidInput(
                "phantom needs size >= 4 and n_val <= n_subjects".into(),
            ));
        }
        let j = &self.jitter;
        if j.scale < 0.0 || j.scale >= 1.0 || self.smooth_warp_amplitude < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::InvalidInput(
                "jitter ranges must be non-negative, scale < 1".into(),
            ));
        }
        let centre = (self.size as f64 - 1.0) / 2.0;
        let hi = self.size as f64 - 1.0;
        let rotates = j.rotation_deg.iter().any(|&r| r != 0.0);
        for (i, s) in self.structures.iter().enumerate() {
            let extent: [f64; 3] = if rotates {
                // any rotation: bound by the enclosing sphere
                let d = s.center.iter().map(|c| (c - centre).powi(2)).sum::<f64>().sqrt();
                let r = match s.kind {
                    StructureKind::Ellipsoid => s.radii.iter().cloned().fold(0.0, f64::max),
                    StructureKind::Box => s.radii.iter().map(|r| r * r).sum::<f64>().sqrt(),
                };
                [d + r; 3].map(|v| v * (1.0 + j.scale))
            } else {
                std::array::from_fn(|a| ((s.center[a] - centre).abs() + s.radii[a]) * (1.0 + j.scale))
            };
            for a in 0..3 {
                let reach = extent[a] + j.translation[a] + self.smooth_warp_amplitude;
                if centre - reach < 0.0 || centre + reach > hi {
                    return Err(Error::InvalidInput(format!(
                        "structure {i} can leave the volume along axis {a} under maximal jitter"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Ground truth for one subject: `affine` maps template to subject
/// coordinates; the smooth warp is regenerated from `warp_seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectTruth {
    pub id: String,
    pub affine: [[f64; 4]; 4],
    pub warp_seed: u64,
    pub warp_amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomTruth {
    pub spec: PhantomSpec,
    pub subjects: Vec<SubjectTruth>,
}

impl PhantomTruth {
    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(TRUTH_FILE);
        if !p.exists() {
            return Err(Error::MissingFile(p));
        }
        serde_json::from_slice(&fs::read(&p)?).map_err(|e| Error::format(&p, e.to_string()))
    }

    pub fn subject(&self, id: &str) -> Option<&SubjectTruth> {
        self.subjects.iter().find(|s| s.id == id)
    }
}

/// Smooth displacement field from a coarse random control grid, sampled
/// trilinearly; control points span the volume corners.
pub struct SmoothWarp {
    ctrl: Vec<[f64; 3]>,
    size: usize,
}

impl SmoothWarp {
    pub fn new(seed: u64, amplitude: f64, size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = WARP_CONTROL_POINTS.pow(3);
        let ctrl = (0..n)
            .map(|_| {
                if amplitude == 0.0 {
                    [0.0; 3]
                } else {
                    std::array::from_fn(|_| rng.random_range(-amplitude..=amplitude))
                }
            })
            .collect();
        Self { ctrl, size }
    }

    pub fn displacement(&self, p: [f64; 3]) -> [f64; 3] {
        let m = WARP_CONTROL_POINTS;
        let scale = (m - 1) as f64 / (self.size as f64 - 1.0).max(1.0);
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let c = (p[a] * scale).clamp(0.0, (m - 1) as f64);
            let b = (c.floor() as usize).min(m - 2);
            base[a] = b;
            frac[a] = c - b as f64;
        }
        let mut out = [0.0; 3];
        for corner in 0..8 {
            let off = [corner >> 2 & 1, corner >> 1 & 1, corner & 1];
            let w: f64 = (0..3)
                .map(|a| if off[a] == 1 { frac[a] } else { 1.0 - frac[a] })
                .product();
            if w == 0.0 {
                continue;
            }
            let idx = ((base[0] + off[0]) * m + base[1] + off[1]) * m + base[2] + off[2];
            for a in 0..3 {
                out[a] += w * self.ctrl[idx][a];
            }
        }
        out
    }
}

/// Normalized distance: < 1 inside, 1 on the surface.
fn shape_radius(s: &Structure, p: [f64; 3]) -> f64 {
    let q: [f64; 3] = std::array::from_fn(|a| (p[a] - s.center[a]) / s.radii[a]);
    match s.kind {
        StructureKind::Ellipsoid => q.iter().map(|v| v * v).sum::<f64>().sqrt(),
        StructureKind::Box => q.iter().fold(0.0f64, |m, v| m.max(v.abs())),
    }
}

/// Intensity and hard label of the template at point `p`.
fn render_point(structures: &[Structure], p: [f64; 3]) -> (f64, u8) {
    let mut value = 0.0;
    let mut label = 0;
    for s in structures {
        let r = shape_radius(s, p);
        let rmin = s.radii.iter().cloned().fold(f64::INFINITY, f64::min);
        let m = 1.0 / (1.0 + (-(1.0 - r) * rmin / EDGE).exp());
        value = value * (1.0 - m) + s.intensity * m;
        if s.label > 0 && r <= 1.0 {
            label = s.label;
        }
    }
    (value, label)
}

/// Renders one subject: voxel `x` shows the template at
/// `A⁻¹(x) + warp(x)`.
pub fn render_subject(
    spec: &PhantomSpec,
    affine: &Affine,
    warp: &SmoothWarp,
    noise_seed: u64,
) -> Result<(Volume, SegMap)> {
    let shape = spec.shape();
    let inv = affine.inverse()?;
    let n = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).map_err(|e| Error::InvalidInput(e.to_string()))?;
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            for k in 0..shape[2] {
                let x = [i as f64, j as f64, k as f64];
                let p = inv.apply(x);
                let d = warp.displacement(x);
                let (v, l) = render_point(&spec.structures, [p[0] + d[0], p[1] + d[1], p[2] + d[2]]);
                let eps = if spec.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                data.push((v + eps) as f32);
                labels.push(l);
            }
        }
    }
    Ok((
        Volume::new(shape, data)?,
        SegMap::new(shape, labels, spec.num_labels())?,
    ))
}

fn sample_affine(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Affine {
    let j = &spec.jitter;
    let mut draw = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    let t: [f64; 3] = std::array::from_fn(|a| draw(j.translation[a]));
    let rot: [f64; 3] = std::array::from_fn(|a| draw(j.rotation_deg[a]));
    let s = 1.0 + draw(j.scale);
    let c = Affine::center_of(spec.shape());
    let mut a = Affine::scaling(s, c);
    for (axis, &deg) in rot.iter().enumerate() {
        a = Affine::rotation(axis, deg, c).compose(&a);
    }
    Affine::translation(t).compose(&a)
}

pub fn subject_id(i: usize) -> String {
    format!("s{i:03}")
}

/// Writes `n_subjects` volume/label pairs, `manifest.json` and `truth.json`
/// under `out_dir`.
pub fn generate_phantom_dataset(spec: &PhantomSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut subjects = Vec::with_capacity(spec.n_subjects);
    let mut truth = Vec::with_capacity(spec.n_subjects);
    for i in 0..spec.n_subjects {
        let id = subject_id(i);
        let affine = sample_affine(spec, &mut master);
        let warp_seed: u64 = master.random();
        let noise_seed: u64 = master.random();
        let warp = SmoothWarp::new(warp_seed, spec.smooth_warp_amplitude, spec.size);
        let (vol, seg) = render_subject(spec, &affine, &warp, noise_seed)?;
        for l in 1..=spec.num_labels() {
            if seg.count(l) == 0 {
                return Err(Error::InvalidInput(format!("label {l} vanished in subject {id}")));
            }
        }
        let rel = PathBuf::from("subjects").join(&id);
        save_volume(&out_dir.join(&rel).join("image"), &vol)?;
        save_segmap(&out_dir.join(&rel).join("seg"), &seg)?;
        subjects.push(SubjectEntry {
            id: id.clone(),
            volume_path: rel.join("image"),
            seg_path: rel.join("seg"),
            split: if i + spec.n_val >= spec.n_subjects {
                Split::Val
            } else {
                Split::Train
            },
        });
        truth.push(SubjectTruth {
            id,
            affine: affine.to_rows(),
            warp_seed,
            warp_amplitude: spec.smooth_warp_amplitude,
        });
    }
    let mut manifest = DatasetManifest {
        subjects,
        root: out_dir.to_path_buf(),
    };
    manifest.save(out_dir)?;
    let t = PhantomTruth {
        spec: spec.clone(),
        subjects: truth,
    };
    fs::write(out_dir.join(TRUTH_FILE), serde_json::to_vec_pretty(&t)?)?;
    manifest.root = out_dir.to_path_buf();
    Ok(manifest)
}
