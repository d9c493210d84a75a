//! PCA of the encoder latent space: latent collection, basis fitting,
//! projection, reconstruction and decoding of principal vectors into
//! elementary deformations.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regnet::{LatentCode, RegNet};
use crate::volgrid::{DatasetManifest, Split};
use crate::warp::{integrate_spatial_gradients, DeformationGrid, GradientField};

/// One flattened latent per row, aligned with `subject_ids`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMatrix {
    pub n: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    pub subject_ids: Vec<String>,
    pub model_fingerprint: String,
}

impl LatentMatrix {
    pub fn new(rows: Vec<Vec<f64>>, subject_ids: Vec<String>, model_fingerprint: String) -> Result<Self> {
        if rows.len() != subject_ids.len() {
            return Err(Error::shape(rows.len(), subject_ids.len()));
        }
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::shape(dim, r.len()));
        }
        Ok(Self {
            n: rows.len(),
            dim,
            data: rows.concat(),
            subject_ids,
            model_fingerprint,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Encodes every subject of `split` once, in manifest order.
pub fn collect_latents(net: &RegNet, manifest: &DatasetManifest, split: Split) -> Result<LatentMatrix> {
    let entries = manifest.split(split);
    let mut rows = Vec::with_capacity(entries.len());
    let mut ids = Vec::with_capacity(entries.len());
    for e in entries {
        let (v, _) = manifest.load_normalized(e)?;
        rows.push(net.encode(&v)?.into_flat());
        ids.push(e.id.clone());
    }
    LatentMatrix::new(rows, ids, net.fingerprint())
}

const LAT_MAGIC: &[u8; 8] = b"RGLTLATS";
const LAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct LatHeader {
    version: u32,
    n: usize,
    dim: usize,
    subject_ids: Vec<String>,
    model_fingerprint: String,
}

pub fn save_latents(path: &Path, m: &LatentMatrix) -> Result<()> {
    let header = serde_json::to_vec(&LatHeader {
        version: LAT_VERSION,
        n: m.n,
        dim: m.dim,
        subject_ids: m.subject_ids.clone(),
        model_fingerprint: m.model_fingerprint.clone(),
    })?;
    let mut out = Vec::with_capacity(20 + header.len() + m.data.len() * 8);
    out.extend_from_slice(LAT_MAGIC);
    out.extend_from_slice(&LAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_latents(path: &Path) -> Result<LatentMatrix> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    let bad = |r: String| Error::format(path, r);
    if bytes.len() < 20 || &bytes[..8] != LAT_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != LAT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let hend = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header".into()))?;
    let h: LatHeader = serde_json::from_slice(&bytes[20..hend]).map_err(|e| bad(e.to_string()))?;
    let payload = &bytes[hend..];
    if payload.len() != h.n * h.dim * 8 || h.subject_ids.len() != h.n {
        return Err(bad(format!("payload does not hold {} x {} values", h.n, h.dim)));
    }
    Ok(LatentMatrix {
        n: h.n,
        dim: h.dim,
        data: payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        subject_ids: h.subject_ids,
        model_fingerprint: h.model_fingerprint,
    })
}

/// Principal basis of a latent matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaBasis {
    pub k: usize,
    pub dim: usize,
    /// `k x dim`, row-major, orthonormal rows.
    pub components: Vec<f64>,
    /// Row mean; only applied when `center` is set.
    pub mean: Vec<f64>,
    pub singular_values: Vec<f64>,
    pub evr: Vec<f64>,
    pub center: bool,
    pub model_fingerprint: String,
}

pub const SIGN_CONVENTION: &str = "max-abs-positive";

impl PcaBasis {
    /// Component `j`, 1-based.
    pub fn component(&self, j: usize) -> Result<&[f64]> {
        if j == 0 || j > self.k {
            return Err(Error::InvalidInput(format!("component {j} outside 1..={}", self.k)));
        }
        Ok(&self.components[(j - 1) * self.dim..j * self.dim])
    }

    pub fn cumulative_evr(&self) -> Vec<f64> {
        self.evr
            .iter()
            .scan(0.0, |acc, &e| {
                *acc += e;
                Some(*acc)
            })
            .collect()
    }

    pub fn check_model(&self, net: &RegNet) -> Result<()> {
        let found = net.fingerprint();
        if found != self.model_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.model_fingerprint.clone(),
                found,
            });
        }
        Ok(())
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim {
            return Err(Error::shape(self.dim, len));
        }
        Ok(())
    }

    /// Coefficients `a_j = (z - mean·center) · u_j`.
    pub fn project(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(z.len())?;
        let zc: Vec<f64> = if self.center {
            z.iter().zip(&self.mean).map(|(a, m)| a - m).collect()
        } else {
            z.to_vec()
        };
        Ok(self
            .components
            .chunks_exact(self.dim)
            .map(|u| u.iter().zip(&zc).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// `mean·center + Σ a_j u_j`.
    pub fn reconstruct(&self, a: &[f64]) -> Result<Vec<f64>> {
        let mut z = if self.center {
            self.mean.clone()
        } else {
            vec![0.0; self.dim]
        };
        self.accumulate(a, &mut z)?;
        Ok(z)
    }

    /// `Σ a_j u_j` without the mean, accumulated in component order from
    /// zero. A one-hot `a` yields exactly `λ·u_j`.
    pub fn combine(&self, a: &[f64]) -> Result<Vec<f64>> {
        let mut z = vec![0.0; self.dim];
        self.accumulate(a, &mut z)?;
        Ok(z)
    }

    fn accumulate(&self, a: &[f64], z: &mut [f64]) -> Result<()> {
        if a.len() != self.k {
            return Err(Error::shape(self.k, a.len()));
        }
        for (&aj, u) in a.iter().zip(self.components.chunks_exact(self.dim)) {
            if aj == 0.0 {
                continue;
            }
            for (t, &x) in z.iter_mut().zip(u) {
                *t += aj * x;
            }
        }
        Ok(())
    }

    /// Components and mean rounded to the stored `f32` precision.
    pub fn quantized(&self) -> PcaBasis {
        let q = |v: &[f64]| v.iter().map(|&x| x as f32 as f64).collect();
        PcaBasis {
            components: q(&self.components),
            mean: q(&self.mean),
            ..self.clone()
        }
    }
}

/// PCA of the rows of `x` (`n x dim`), optionally mean-centered.
///
/// Uses the `n x n` Gram matrix, which is small because there are far fewer
/// subjects than latent entries; components are `u_j = Xᵀ v_j / σ_j`.
pub fn fit_pca_rows(
    x: &[f64],
    n: usize,
    dim: usize,
    k: usize,
    center: bool,
    model_fingerprint: &str,
) -> Result<PcaBasis> {
    if x.len() != n * dim {
        return Err(Error::shape(n * dim, x.len()));
    }
    if n < 2 {
        return Err(Error::InvalidInput("PCA needs at least two rows".into()));
    }
    let max_k = (n - usize::from(center)).min(dim);
    if k == 0 || k > max_k {
        return Err(Error::InvalidInput(format!("K = {k} must be in 1..={max_k}")));
    }
    let mut mean = vec![0.0; dim];
    for r in x.chunks_exact(dim) {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let xc: Vec<f64> = if center {
        x.chunks_exact(dim)
            .flat_map(|r| r.iter().zip(&mean).map(|(a, m)| a - m))
            .collect()
    } else {
        x.to_vec()
    };
    let rows: Vec<&[f64]> = xc.chunks_exact(dim).collect();
    let gram = DMatrix::from_fn(n, n, |i, j| {
        rows[i].iter().zip(rows[j]).map(|(a, b)| a * b).sum::<f64>()
    });
    let total: f64 = (0..n).map(|i| gram[(i, i)]).sum();
    if total <= 0.0 {
        return Err(Error::InvalidInput("latent matrix has no variance".into()));
    }
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut components = Vec::with_capacity(k * dim);
    let mut singular_values = Vec::with_capacity(k);
    let mut evr = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let lambda = eig.eigenvalues[idx].max(0.0);
        // below round-off of the Gram matrix the direction is undetermined
        let (mut u, sigma, ratio) = if lambda > 1e-12 * total {
            let sigma = lambda.sqrt();
            let v = eig.eigenvectors.column(idx);
            let mut u = vec![0.0; dim];
            for (i, r) in rows.iter().enumerate() {
                let c = v[i] / sigma;
                for (t, &a) in u.iter_mut().zip(*r) {
                    *t += c * a;
                }
            }
            (u, sigma, lambda / total)
        } else {
            (null_direction(&components, dim), 0.0, 0.0)
        };
        // deterministic sign: largest-magnitude entry positive
        let pivot = u
            .iter()
            .enumerate()
            .fold(0, |best, (i, &val)| if val.abs() > u[best].abs() { i } else { best });
        if u[pivot] < 0.0 {
            u.iter_mut().for_each(|t| *t = -*t);
        }
        components.extend_from_slice(&u);
        singular_values.push(sigma);
        evr.push(ratio);
    }
    Ok(PcaBasis {
        k,
        dim,
        components,
        mean,
        singular_values,
        evr,
        center,
        model_fingerprint: model_fingerprint.to_string(),
    })
}

/// Unit vector orthogonal to the rows of `basis`: the first canonical vector
/// with a usable residual after Gram-Schmidt (applied twice for stability).
fn null_direction(basis: &[f64], dim: usize) -> Vec<f64> {
    for axis in 0..dim {
        let mut u = vec![0.0; dim];
        u[axis] = 1.0;
        for _ in 0..2 {
            for b in basis.chunks_exact(dim) {
                let d: f64 = b.iter().zip(&u).map(|(x, y)| x * y).sum();
                u.iter_mut().zip(b).for_each(|(t, &x)| *t -= d * x);
            }
        }
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.5 {
            u.iter_mut().for_each(|t| *t /= norm);
            return u;
        }
    }
    unreachable!("k <= dim leaves a free direction")
}

pub fn fit_pca(l: &LatentMatrix, k: usize, center: bool) -> Result<PcaBasis> {
    fit_pca_rows(&l.data, l.n, l.dim, k, center, &l.model_fingerprint)
}

/// Deformation grid for `λ·u_j` (no mean added).
pub fn decode_component(net: &RegNet, basis: &PcaBasis, j: usize, lambda: f64) -> Result<DeformationGrid> {
    let z: Vec<f64> = basis.component(j)?.iter().map(|&u| lambda * u).collect();
    decode_flat(net, basis, z)
}

/// Deformation grid for the linear combination `Σ a_j u_j`.
pub fn decode_combination(net: &RegNet, basis: &PcaBasis, a: &[f64]) -> Result<DeformationGrid> {
    let z = basis.combine(a)?;
    decode_flat(net, basis, z)
}

fn decode_flat(net: &RegNet, basis: &PcaBasis, z: Vec<f64>) -> Result<DeformationGrid> {
    basis.check_model(net)?;
    let code = LatentCode::from_flat(net.arch(), z)?;
    let inc: GradientField = net.decode(&code)?;
    Ok(integrate_spatial_gradients(&inc))
}

// ---------------------------------------------------------------------------
// Basis and coefficient files
// ---------------------------------------------------------------------------

pub const BASIS_FILE: &str = "basis.json";
pub const COMPONENTS_FILE: &str = "components.raw";
pub const MEAN_FILE: &str = "mean.raw";

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct BasisHeader {
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "N")]
    n: usize,
    evr: Vec<f64>,
    #[serde(rename = "singular_values")]
    singular_values: Vec<f64>,
    center: bool,
    #[serde(rename = "sign_convention")]
    sign_convention: String,
    #[serde(rename = "model_fingerprint")]
    model_fingerprint: String,
}

fn write_f32(path: &Path, v: &[f64]) -> Result<()> {
    let mut out = Vec::with_capacity(v.len() * 4);
    for &x in v {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_f32(path: &Path, len: usize) -> Result<Vec<f64>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    if bytes.len() != len * 4 {
        return Err(Error::format(
            path,
            format!("expected {} bytes, found {}", len * 4, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect())
}

/// Writes `basis.json`, `components.raw` and `mean.raw` into `dir`.
/// Components and mean are stored as `f32`.
pub fn save_basis(dir: &Path, b: &PcaBasis) -> Result<()> {
    fs::create_dir_all(dir)?;
    let header = BasisHeader {
        k: b.k,
        n: b.dim,
        evr: b.evr.clone(),
        singular_values: b.singular_values.clone(),
        center: b.center,
        sign_convention: SIGN_CONVENTION.into(),
        model_fingerprint: b.model_fingerprint.clone(),
    };
    fs::write(dir.join(BASIS_FILE), serde_json::to_vec_pretty(&header)?)?;
    write_f32(&dir.join(COMPONENTS_FILE), &b.components)?;
    write_f32(&dir.join(MEAN_FILE), &b.mean)?;
    Ok(())
}

pub fn load_basis(dir: &Path) -> Result<PcaBasis> {
    let hp = dir.join(BASIS_FILE);
    if !hp.exists() {
        return Err(Error::MissingFile(hp));
    }
    let h: BasisHeader = serde_json::from_slice(&fs::read(&hp)?).map_err(|e| Error::format(&hp, e.to_string()))?;
    if h.evr.len() != h.k || h.singular_values.len() != h.k {
        return Err(Error::format(&hp, "evr/singular value count differs from K"));
    }
    if h.sign_convention != SIGN_CONVENTION {
        return Err(Error::format(
            &hp,
            format!("unknown sign convention {}", h.sign_convention),
        ));
    }
    Ok(PcaBasis {
        k: h.k,
        dim: h.n,
        components: read_f32(&dir.join(COMPONENTS_FILE), h.k * h.n)?,
        mean: read_f32(&dir.join(MEAN_FILE), h.n)?,
        singular_values: h.singular_values,
        evr: h.evr,
        center: h.center,
        model_fingerprint: h.model_fingerprint,
    })
}

/// Per-subject coefficient vector.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientVector {
    pub subject_id: String,
    pub a: Vec<f64>,
}

/// Projects every row of a latent matrix.
pub fn project_matrix(basis: &PcaBasis, l: &LatentMatrix) -> Result<Vec<CoefficientVector>> {
    if l.model_fingerprint != basis.model_fingerprint {
        return Err(Error::FingerprintMismatch {
            expected: basis.model_fingerprint.clone(),
            found: l.model_fingerprint.clone(),
        });
    }
    (0..l.n)
        .map(|i| {
            Ok(CoefficientVector {
                subject_id: l.subject_ids[i].clone(),
                a: basis.project(l.row(i))?,
            })
        })
        .collect()
}

pub fn coeffs_csv(k: usize, coeffs: &[CoefficientVector]) -> String {
    let mut s = String::from("subject");
    for j in 1..=k {
        write!(s, ",a{j}").unwrap();
    }
    s.push('\n');
    for c in coeffs {
        s.push_str(&c.subject_id);
        for v in &c.a {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn save_coeffs(path: &Path, k: usize, coeffs: &[CoefficientVector]) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    fs::write(path, coeffs_csv(k, coeffs))?;
    Ok(())
}

pub fn load_coeffs(path: &Path) -> Result<Vec<CoefficientVector>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format(path, "empty file"))?;
    let k = header.split(',').count() - 1;
    if !header.starts_with("subject") {
        return Err(Error::format(path, "missing subject column"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let mut it = l.split(',');
            let id = it.next().unwrap_or_default().to_string();
            let a = it
                .map(|t| t.parse::<f64>().map_err(|e| Error::format(path, e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            if a.len() != k {
                return Err(Error::format(
                    path,
                    format!("row {id} has {} values, expected {k}", a.len()),
                ));
            }
            Ok(CoefficientVector { subject_id: id, a })
        })
        .collect()
}
