//! Python bindings: geometry primitives, run configs, the pretrain and probe
//! commands, and frozen-encoder inference.

// The pyfunction macro expansion trips this lint on every fallible signature.
#![allow(clippy::useless_conversion)]

use std::path::PathBuf;

use pocca_core::autodiff::{Precision, Real};
use pocca_core::cli::{self, peek_precision, Checkpoint, PretrainArgs, ProbeArgs};
use pocca_core::geometry::{self, Point3, PointCloud};
use pocca_core::model::{encode_batch, BnMode, ModelParams, ENCODER_ONLINE};
use pocca_core::train::{self, init_params};
use pocca_core::Error;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::InvalidInput(_) | Error::Shape(_) | Error::Format(_) | Error::Json(_) => {
            PyValueError::new_err(e.to_string())
        }
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn cloud(points: Vec<[f64; 3]>) -> PyResult<PointCloud> {
    PointCloud::new(points).map_err(py_err)
}

/// Farthest-point sample of `m` indices starting from `seed`.
#[pyfunction]
#[pyo3(signature = (points, m, seed=0))]
fn fps(points: Vec<[f64; 3]>, m: usize, seed: usize) -> PyResult<Vec<usize>> {
    geometry::fps(&cloud(points)?, m, seed).map_err(py_err)
}

/// Indices of the `k` nearest points to `query`, nearest first.
#[pyfunction]
fn knn(points: Vec<[f64; 3]>, query: [f64; 3], k: usize) -> PyResult<Vec<usize>> {
    geometry::knn(&cloud(points)?, &query, k).map_err(py_err)
}

/// `2 - 2 cos(p, z)`.
#[pyfunction]
fn similarity_loss(p: Vec<f64>, z: Vec<f64>) -> PyResult<f64> {
    train::similarity_loss(&p, &z).map_err(py_err)
}

/// A validated run configuration.
#[pyclass(name = "RunConfig")]
#[derive(Clone)]
struct PyRunConfig {
    inner: cli::RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// The built-in desk config.
    #[staticmethod]
    fn desk() -> Self {
        PyRunConfig {
            inner: cli::RunConfig::desk(),
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyRunConfig {
            inner: cli::RunConfig::from_value(value, &[]).map_err(py_err)?,
        })
    }

    /// A copy with `key=value` overrides applied, e.g. `"train.lr=0.001"`.
    fn with_overrides(&self, overrides: Vec<String>) -> PyResult<Self> {
        let value = serde_json::to_value(&self.inner).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok(PyRunConfig {
            inner: cli::RunConfig::from_value(value, &overrides).map_err(py_err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_pretty_json()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(hash={})", &self.inner.hash()[..12])
    }
}

type Patches = (Vec<Vec<Point3>>, Vec<usize>, Vec<u32>);

/// Patches of one cloud under the config's sampler settings, as
/// `(patches, kernel_indices, scale_tags)`.
#[pyfunction]
#[pyo3(signature = (points, config=None, seed=0))]
fn sample_patches(points: Vec<[f64; 3]>, config: Option<PyRunConfig>, seed: u64) -> PyResult<Patches> {
    let cfg = config.map_or_else(cli::RunConfig::desk, |c| c.inner);
    let set = geometry::sample_patches(
        &cloud(points)?,
        &cfg.views.sampler,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .map_err(py_err)?;
    Ok((set.patches, set.kernel_indices, set.scale_tags))
}

fn write_temp_config(py_cfg: Option<&PyRunConfig>, dir: &TempDir) -> PyResult<Option<PathBuf>> {
    let Some(c) = py_cfg else { return Ok(None) };
    let path = dir.path().join("config.json");
    std::fs::write(&path, c.inner.to_pretty_json())?;
    Ok(Some(path))
}

/// Pretrain under `config` (the desk config when omitted). Returns a summary
/// dict with `steps_run`, `final_step`, `final_loss`, `finished` and
/// `output_dir`.
#[pyfunction]
#[pyo3(signature = (config=None, overrides=Vec::new(), resume=None, max_steps=None, allow_config_mismatch=false))]
fn pretrain(
    py: Python<'_>,
    config: Option<PyRunConfig>,
    overrides: Vec<String>,
    resume: Option<PathBuf>,
    max_steps: Option<u64>,
    allow_config_mismatch: bool,
) -> PyResult<Py<PyDict>> {
    let dir = TempDir::new()?;
    let args = PretrainArgs {
        config: write_temp_config(config.as_ref(), &dir)?,
        overrides,
        resume,
        allow_config_mismatch,
        max_steps,
        workers: 1,
    };
    let s = py.allow_threads(|| cli::cmd_pretrain(&args)).map_err(py_err)?;
    let d = PyDict::new_bound(py);
    d.set_item("steps_run", s.steps_run)?;
    d.set_item("final_step", s.final_step)?;
    d.set_item("final_loss", s.final_loss)?;
    d.set_item("finished", s.finished)?;
    d.set_item("output_dir", s.output_dir.to_string_lossy().into_owned())?;
    Ok(d.unbind())
}

/// Linear and few-shot probes of a checkpoint's encoder, or of a freshly
/// initialized one with `random_init=True`.
#[pyfunction]
#[pyo3(signature = (checkpoint=None, config=None, overrides=Vec::new(), random_init=false, output_dir=None))]
fn probe(
    py: Python<'_>,
    checkpoint: Option<PathBuf>,
    config: Option<PyRunConfig>,
    overrides: Vec<String>,
    random_init: bool,
    output_dir: Option<PathBuf>,
) -> PyResult<Py<PyDict>> {
    let dir = TempDir::new()?;
    let args = ProbeArgs {
        checkpoint,
        config: write_temp_config(config.as_ref(), &dir)?,
        overrides,
        random_init,
        output_dir,
    };
    let s = py.allow_threads(|| cli::cmd_probe(&args)).map_err(py_err)?;
    let d = PyDict::new_bound(py);
    d.set_item("accuracy", s.accuracy)?;
    d.set_item("few_shot", s.few_shot)?;
    d.set_item("output_dir", s.output_dir.to_string_lossy().into_owned())?;
    Ok(d.unbind())
}

/// Finite-difference check of every op and the full model. Returns
/// `(passed, report_lines)`.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn gradcheck(py: Python<'_>, seed: u64) -> PyResult<(bool, Vec<String>)> {
    let lines = py.allow_threads(|| cli::run_gradcheck(seed, None)).map_err(py_err)?;
    let passed = lines.iter().all(|l| l.passes());
    Ok((passed, lines.iter().map(|l| l.format()).collect()))
}

enum Params {
    Single(ModelParams<f32>),
    Double(ModelParams<f64>),
}

fn encode_with<T: Real>(p: &ModelParams<T>, clouds: &[Vec<Point3>]) -> pocca_core::Result<Vec<Vec<f64>>> {
    let refs: Vec<&[Point3]> = clouds.iter().map(Vec::as_slice).collect();
    let (z, _) = encode_batch(p, ENCODER_ONLINE, &refs, BnMode::Eval)?;
    let d = p.config.dim;
    Ok(z.chunks(d)
        .map(|row| row.iter().map(|v| v.as_f64()).collect())
        .collect())
}

fn restore<T: Real>(bytes: &[u8]) -> pocca_core::Result<ModelParams<T>> {
    let ckpt = Checkpoint::<T>::decode(bytes)?;
    let value: serde_json::Value = serde_json::from_str(&ckpt.config_json)?;
    let cfg = cli::RunConfig::from_value(value, &[])?;
    let mut params = init_params::<T>(&cfg.model, cfg.train.seed)?;
    let encoder = ckpt.encoder()?.clone();
    if !params.groups[ENCODER_ONLINE].same_layout(&encoder) {
        return Err(Error::InvalidInput(
            "checkpoint encoder does not match its config".into(),
        ));
    }
    params.groups[ENCODER_ONLINE] = encoder;
    Ok(params)
}

/// The frozen online encoder, evaluated with stored normalization statistics.
#[pyclass]
struct Encoder {
    params: Params,
}

#[pymethods]
impl Encoder {
    /// Load from a full checkpoint or an encoder export.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let bytes = std::fs::read(&path)?;
        let params = match peek_precision(&bytes).map_err(py_err)? {
            Precision::F32 => Params::Single(restore(&bytes).map_err(py_err)?),
            Precision::F64 => Params::Double(restore(&bytes).map_err(py_err)?),
        };
        Ok(Encoder { params })
    }

    /// A freshly initialized encoder for `config` (the desk config when omitted).
    #[staticmethod]
    #[pyo3(signature = (config=None, seed=0))]
    fn random(config: Option<PyRunConfig>, seed: u64) -> PyResult<Self> {
        let cfg = config.map_or_else(cli::RunConfig::desk, |c| c.inner);
        let params = match cfg.train.precision {
            Precision::F32 => Params::Single(init_params(&cfg.model, seed).map_err(py_err)?),
            Precision::F64 => Params::Double(init_params(&cfg.model, seed).map_err(py_err)?),
        };
        Ok(Encoder { params })
    }

    #[getter]
    fn dim(&self) -> usize {
        match &self.params {
            Params::Single(p) => p.config.dim,
            Params::Double(p) => p.config.dim,
        }
    }

    /// One feature vector per cloud.
    fn encode(&self, py: Python<'_>, clouds: Vec<Vec<[f64; 3]>>) -> PyResult<Vec<Vec<f64>>> {
        if clouds.iter().any(Vec::is_empty) {
            return Err(PyValueError::new_err("every cloud needs at least one point"));
        }
        py.allow_threads(|| match &self.params {
            Params::Single(p) => encode_with(p, &clouds),
            Params::Double(p) => encode_with(p, &clouds),
        })
        .map_err(py_err)
    }
}

#[pymodule]
fn pocca(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(fps, m)?)?;
    m.add_function(wrap_pyfunction!(knn, m)?)?;
    m.add_function(wrap_pyfunction!(similarity_loss, m)?)?;
    m.add_function(wrap_pyfunction!(sample_patches, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(probe, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<Encoder>()?;
    Ok(())
}
