//! Python bindings: phantom data, training, latent PCA, component decoding
//! and probes. Volumes cross the boundary as flat lists plus a shape.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use reglat::latent::{self, LatentMatrix, PcaBasis};
use reglat::phantom::{generate_phantom_dataset, PhantomSpec};
use reglat::probes::{affine_perturbation_probe, ProbeSpec, ProbeSummary, ProbeTransform};
use reglat::regnet::{load_checkpoint, save_checkpoint, ArchConfig, Checkpoint, RegNet};
use reglat::trainer::{self, AugmentConfig, TrainConfig};
use reglat::volgrid::{DatasetManifest, Split, Volume};
use reglat::warp::{jacobian_determinant_map, warp_trilinear, DeformationGrid};

pyo3::create_exception!(reglat, FingerprintError, PyValueError);

fn err(e: reglat::Error) -> PyErr {
    match e {
        reglat::Error::MissingFile(p) => PyFileNotFoundError::new_err(p.display().to_string()),
        reglat::Error::FingerprintMismatch { .. } => FingerprintError::new_err(e.to_string()),
        reglat::Error::Io(_) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

pub fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        _ => Err(format!("split must be 'train' or 'val', got '{s}'")),
    }
}

fn split_arg(s: &str) -> PyResult<Split> {
    parse_split(s).map_err(PyValueError::new_err)
}

#[pyclass(name = "Volume", module = "reglat", frozen)]
pub struct PyVolume(pub Volume);

#[pymethods]
impl PyVolume {
    #[new]
    fn new(shape: [usize; 3], data: Vec<f32>) -> PyResult<Self> {
        Volume::new(shape, data).map(Self).map_err(err)
    }

    #[getter]
    fn shape(&self) -> [usize; 3] {
        self.0.shape()
    }

    fn tolist(&self) -> Vec<f32> {
        self.0.data().to_vec()
    }

    fn get(&self, i: usize, j: usize, k: usize) -> PyResult<f32> {
        let s = self.0.shape();
        if i >= s[0] || j >= s[1] || k >= s[2] {
            return Err(PyValueError::new_err(format!("index ({i}, {j}, {k}) outside {s:?}")));
        }
        Ok(self.0.get(i, j, k))
    }

    fn __repr__(&self) -> String {
        format!("Volume(shape={:?})", self.0.shape())
    }
}

#[pyclass(name = "Manifest", module = "reglat", frozen)]
pub struct PyManifest(pub DatasetManifest);

#[pymethods]
impl PyManifest {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        DatasetManifest::load(&path).map(Self).map_err(err)
    }

    #[pyo3(signature = (split=None))]
    fn subject_ids(&self, split: Option<&str>) -> PyResult<Vec<String>> {
        Ok(match split {
            Some(s) => self.0.split(split_arg(s)?).iter().map(|e| e.id.clone()).collect(),
            None => self.0.subjects.iter().map(|e| e.id.clone()).collect(),
        })
    }

    /// Intensity-normalized volume of one subject.
    fn volume(&self, id: &str) -> PyResult<PyVolume> {
        let e = self
            .0
            .get(id)
            .ok_or_else(|| PyValueError::new_err(format!("unknown subject '{id}'")))?;
        Ok(PyVolume(self.0.load_normalized(e).map_err(err)?.0))
    }

    fn __len__(&self) -> usize {
        self.0.subjects.len()
    }
}

/// Writes a synthetic dataset and returns its manifest.
#[pyfunction]
#[pyo3(signature = (out_dir, size=32, n_subjects=40, n_val=8, seed=0, translation_only=None))]
fn generate_phantom(
    out_dir: PathBuf,
    size: usize,
    n_subjects: usize,
    n_val: usize,
    seed: u64,
    translation_only: Option<f64>,
) -> PyResult<PyManifest> {
    let mut spec = match translation_only {
        Some(t) => PhantomSpec::translation_only(t),
        None => PhantomSpec::default(),
    };
    spec.structures = reglat::phantom::default_structures(size);
    spec.size = size;
    spec.n_subjects = n_subjects;
    spec.n_val = n_val;
    spec.seed = seed;
    generate_phantom_dataset(&spec, &out_dir).map(PyManifest).map_err(err)
}

#[pyclass(name = "Grid", module = "reglat", frozen)]
pub struct PyGrid(pub DeformationGrid);

#[pymethods]
impl PyGrid {
    #[getter]
    fn shape(&self) -> [usize; 3] {
        self.0.shape()
    }

    /// Channel-major sampling positions, `3 * D * H * W` values.
    fn tolist(&self) -> Vec<f64> {
        self.0.phi().to_vec()
    }

    /// `(min_det, fold_fraction)` over interior voxels.
    fn jacobian_stats(&self) -> PyResult<(f64, f64)> {
        let j = jacobian_determinant_map(&self.0).map_err(err)?;
        Ok((j.min_det(), j.fold_fraction()))
    }

    fn warp(&self, volume: &PyVolume) -> PyResult<PyVolume> {
        warp_trilinear(&volume.0, &self.0).map(PyVolume).map_err(err)
    }
}

#[pyclass(name = "RegNet", module = "reglat", frozen)]
pub struct PyRegNet(pub RegNet);

#[pymethods]
impl PyRegNet {
    #[new]
    #[pyo3(signature = (in_shape=[32, 32, 32], base_channels=8, n_downsamplings=3, skip_connections=false, seed=0))]
    fn new(
        in_shape: [usize; 3],
        base_channels: usize,
        n_downsamplings: usize,
        skip_connections: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let arch = ArchConfig {
            in_shape,
            base_channels,
            n_downsamplings,
            skip_connections,
            ..ArchConfig::default()
        };
        RegNet::new(arch, seed).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_checkpoint(&path, None).map(|c| Self(c.net)).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let c = Checkpoint {
            net: self.0.clone(),
            epoch: 0,
            rng_state: None,
        };
        save_checkpoint(&path, &c).map_err(err)
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.0.fingerprint()
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.0.params().len()
    }

    #[getter]
    fn latent_len(&self) -> usize {
        self.0.arch().latent_len()
    }

    fn encode(&self, py: Python<'_>, volume: &PyVolume) -> PyResult<Vec<f64>> {
        py.detach(|| self.0.encode(&volume.0))
            .map(|z| z.into_flat())
            .map_err(err)
    }

    /// Grid that warps `moving` onto `fixed`.
    fn register(&self, py: Python<'_>, moving: &PyVolume, fixed: &PyVolume) -> PyResult<PyGrid> {
        py.detach(|| self.0.forward_grid(&moving.0.to_f64(), &fixed.0.to_f64()))
            .map(PyGrid)
            .map_err(err)
    }
}

/// Trains a network on the manifest's training split; returns the model and
/// the validation report (if there is a validation split).
#[pyfunction]
#[pyo3(signature = (manifest, out_dir, epochs=10, lr=1e-3, batch_size=4, base_channels=4, n_downsamplings=3, skip_connections=false, augment=false, seed=0))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    manifest: &PyManifest,
    out_dir: PathBuf,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    base_channels: usize,
    n_downsamplings: usize,
    skip_connections: bool,
    augment: bool,
    seed: u64,
) -> PyResult<(PyRegNet, Option<Bound<'py, PyDict>>)> {
    let first = manifest
        .0
        .subjects
        .first()
        .ok_or_else(|| PyValueError::new_err("empty manifest"))?;
    let shape = manifest.0.load_subject(first).map_err(err)?.0.shape();
    let arch = ArchConfig {
        in_shape: shape,
        base_channels,
        n_downsamplings,
        skip_connections,
        ..ArchConfig::default()
    };
    let cfg = TrainConfig {
        lr,
        batch_size,
        epochs,
        seed,
        augment: if augment {
            AugmentConfig::default()
        } else {
            AugmentConfig::none()
        },
        ..TrainConfig::default()
    };
    let out = py
        .detach(|| trainer::train(&manifest.0, &cfg, &arch, &out_dir))
        .map_err(err)?;
    let report = out.eval.as_ref().map(|e| eval_dict(py, e)).transpose()?;
    Ok((PyRegNet(out.net), report))
}

fn eval_dict<'py>(py: Python<'py>, e: &trainer::EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("n_pairs", e.pairs.len())?;
    d.set_item("mean_before", e.mean_before)?;
    d.set_item("std_before", e.std_before)?;
    d.set_item("mean_after", e.mean_after)?;
    d.set_item("std_after", e.std_after)?;
    d.set_item("mean_fold_fraction", e.mean_fold_fraction)?;
    d.set_item("max_fold_fraction", e.max_fold_fraction)?;
    Ok(d)
}

/// Dice and folding over all ordered pairs of a split.
#[pyfunction]
#[pyo3(signature = (net, manifest, split="val"))]
fn evaluate<'py>(py: Python<'py>, net: &PyRegNet, manifest: &PyManifest, split: &str) -> PyResult<Bound<'py, PyDict>> {
    let split = split_arg(split)?;
    let e = py
        .detach(|| trainer::evaluate(&net.0, &manifest.0, split))
        .map_err(err)?;
    eval_dict(py, &e)
}

#[pyclass(name = "Latents", module = "reglat", frozen)]
pub struct PyLatents(pub LatentMatrix);

#[pymethods]
impl PyLatents {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        latent::load_latents(&path).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        latent::save_latents(&path, &self.0).map_err(err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.0.n, self.0.dim)
    }

    #[getter]
    fn subject_ids(&self) -> Vec<String> {
        self.0.subject_ids.clone()
    }

    fn row(&self, i: usize) -> PyResult<Vec<f64>> {
        if i >= self.0.n {
            return Err(PyValueError::new_err(format!("row {i} out of {}", self.0.n)));
        }
        Ok(self.0.row(i).to_vec())
    }
}

#[pyfunction]
#[pyo3(signature = (net, manifest, split="train"))]
fn collect_latents(py: Python<'_>, net: &PyRegNet, manifest: &PyManifest, split: &str) -> PyResult<PyLatents> {
    let split = split_arg(split)?;
    py.detach(|| latent::collect_latents(&net.0, &manifest.0, split))
        .map(PyLatents)
        .map_err(err)
}

#[pyclass(name = "PcaBasis", module = "reglat", frozen)]
pub struct PyBasis(pub PcaBasis);

#[pymethods]
impl PyBasis {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        latent::load_basis(&dir).map(Self).map_err(err)
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        latent::save_basis(&dir, &self.0).map_err(err)
    }

    #[getter]
    fn k(&self) -> usize {
        self.0.k
    }

    #[getter]
    fn evr(&self) -> Vec<f64> {
        self.0.evr.clone()
    }

    #[getter]
    fn cumulative_evr(&self) -> Vec<f64> {
        self.0.cumulative_evr()
    }

    #[getter]
    fn singular_values(&self) -> Vec<f64> {
        self.0.singular_values.clone()
    }

    #[getter]
    fn model_fingerprint(&self) -> String {
        self.0.model_fingerprint.clone()
    }

    /// Component `j`, counting from 1.
    fn component(&self, j: usize) -> PyResult<Vec<f64>> {
        self.0.component(j).map(<[f64]>::to_vec).map_err(err)
    }

    fn project(&self, z: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.project(&z).map_err(err)
    }

    fn reconstruct(&self, a: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.reconstruct(&a).map_err(err)
    }
}

#[pyfunction]
#[pyo3(signature = (latents, k, center=false))]
fn fit_pca(latents: &PyLatents, k: usize, center: bool) -> PyResult<PyBasis> {
    latent::fit_pca(&latents.0, k, center).map(PyBasis).map_err(err)
}

/// Grid decoded from `lambda` times component `j` (1-based).
#[pyfunction]
fn decode_component(py: Python<'_>, net: &PyRegNet, basis: &PyBasis, j: usize, lambda: f64) -> PyResult<PyGrid> {
    py.detach(|| latent::decode_component(&net.0, &basis.0, j, lambda))
        .map(PyGrid)
        .map_err(err)
}

/// Grid decoded from `Σ a_j u_j`.
#[pyfunction]
fn decode_combination(py: Python<'_>, net: &PyRegNet, basis: &PyBasis, coefficients: Vec<f64>) -> PyResult<PyGrid> {
    py.detach(|| latent::decode_combination(&net.0, &basis.0, &coefficients))
        .map(PyGrid)
        .map_err(err)
}

/// Per-component median and quartiles of `|Δa_j|` under an input transform.
#[pyfunction]
#[pyo3(signature = (net, basis, manifest, transform="translation:z:10", split="val"))]
fn probe<'py>(
    py: Python<'py>,
    net: &PyRegNet,
    basis: &PyBasis,
    manifest: &PyManifest,
    transform: &str,
    split: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let t: ProbeTransform = transform.parse().map_err(err)?;
    let spec = ProbeSpec {
        transform: t,
        split: split_arg(split)?,
    };
    let r = py
        .detach(|| affine_perturbation_probe(&net.0, &basis.0, &manifest.0, &spec))
        .map_err(err)?;
    let s = ProbeSummary::from(&r);
    let d = PyDict::new(py);
    d.set_item("transform", &s.transform)?;
    d.set_item("subjects", r.subjects.clone())?;
    d.set_item("median", s.components.iter().map(|c| c.median).collect::<Vec<_>>())?;
    d.set_item("q1", s.components.iter().map(|c| c.q1).collect::<Vec<_>>())?;
    d.set_item("q3", s.components.iter().map(|c| c.q3).collect::<Vec<_>>())?;
    d.set_item("dominance_ratio", s.dominance_ratio)?;
    d.set_item("activation_count", s.activation_count)?;
    d.set_item("csv", r.to_csv())?;
    Ok(d)
}

#[pymodule]
#[pyo3(name = "reglat")]
fn reglat_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FingerprintError", m.py().get_type::<FingerprintError>())?;
    m.add_class::<PyVolume>()?;
    m.add_class::<PyManifest>()?;
    m.add_class::<PyGrid>()?;
    m.add_class::<PyRegNet>()?;
    m.add_class::<PyLatents>()?;
    m.add_class::<PyBasis>()?;
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(collect_latents, m)?)?;
    m.add_function(wrap_pyfunction!(fit_pca, m)?)?;
    m.add_function(wrap_pyfunction!(decode_component, m)?)?;
    m.add_function(wrap_pyfunction!(decode_combination, m)?)?;
    m.add_function(wrap_pyfunction!(probe, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits() {
        assert_eq!(parse_split("train"), Ok(Split::Train));
        assert_eq!(parse_split("val"), Ok(Split::Val));
        assert!(parse_split("test").is_err());
    }
}
