//! Python bindings: point clouds, configs, models, training and metrics.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use psformer::io::{checkpoint_bytes, load_checkpoint, parse_checkpoint, read_ply, save_checkpoint, write_ply};
use psformer::model::check_gradients;
use psformer::predict::predict_cloud;
use psformer::train::{self, gen_synthetic_scene, EpochLog, MetricsReport};
use psformer::{Error, ModelConfig, Regime};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for psformer::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

#[pyclass(name = "PointCloud", module = "psformer")]
#[derive(Clone)]
struct PyPointCloud {
    inner: psformer::PointCloud,
}

#[pymethods]
impl PyPointCloud {
    /// Colors default to 0.5 gray; labels are optional.
    #[new]
    #[pyo3(signature = (coords, colors=None, labels=None))]
    fn new(coords: Vec<[f64; 3]>, colors: Option<Vec<[f64; 3]>>, labels: Option<Vec<bool>>) -> PyResult<Self> {
        let colors = colors.unwrap_or_else(|| vec![[0.5; 3]; coords.len()]);
        Ok(PyPointCloud {
            inner: psformer::PointCloud::new(coords, colors, labels).py()?,
        })
    }

    /// Returns the cloud and the stored saliency, if any.
    #[staticmethod]
    fn read_ply(path: &str) -> PyResult<(Self, Option<Vec<f64>>)> {
        let f = read_ply(path).py()?;
        Ok((PyPointCloud { inner: f.cloud }, f.saliency))
    }

    #[pyo3(signature = (path, probabilities=None, binary=true))]
    fn write_ply(&self, path: &str, probabilities: Option<Vec<f64>>, binary: bool) -> PyResult<()> {
        write_ply(&self.inner, probabilities.as_deref(), path, binary).py()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn coords(&self) -> Vec<[f64; 3]> {
        self.inner.coords.clone()
    }

    #[getter]
    fn colors(&self) -> Vec<[f64; 3]> {
        self.inner.colors.clone()
    }

    #[getter]
    fn norm_coords(&self) -> Vec<[f64; 3]> {
        self.inner.norm_coords.clone()
    }

    #[getter]
    fn labels(&self) -> Option<Vec<bool>> {
        self.inner.labels.clone()
    }
}

#[pyclass(name = "Config", module = "psformer")]
#[derive(Clone)]
struct PyConfig {
    inner: ModelConfig,
}

#[pymethods]
impl PyConfig {
    /// One of `desk`, `tiny` or `full`.
    #[new]
    #[pyo3(signature = (preset="desk"))]
    fn new(preset: &str) -> PyResult<Self> {
        Ok(PyConfig {
            inner: ModelConfig::preset(preset).py()?,
        })
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(PyConfig {
            inner: ModelConfig::parse(text).py()?,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).py()?;
        self.inner.validate().py()
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

/// A model with its Adam state.
#[pyclass(name = "Trainer", module = "psformer")]
struct PyTrainer {
    inner: train::Trainer,
}

fn metrics_dict<'py>(py: Python<'py>, m: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("mae", m.mae)?;
    d.set_item("f_measure", m.f_measure)?;
    d.set_item("e_measure", m.e_measure)?;
    d.set_item("iou", m.iou)?;
    d.set_item("threshold", m.threshold)?;
    d.set_item("samples", m.samples)?;
    Ok(d)
}

fn epoch_dict<'py>(py: Python<'py>, log: &EpochLog) -> PyResult<Bound<'py, PyDict>> {
    let d = metrics_dict(py, &log.metrics)?;
    d.set_item("epoch", log.epoch)?;
    d.set_item("step", log.step)?;
    d.set_item("loss", log.loss)?;
    Ok(d)
}

fn clouds(scenes: &[PyRef<'_, PyPointCloud>]) -> Vec<psformer::PointCloud> {
    scenes.iter().map(|s| s.inner.clone()).collect()
}

#[pymethods]
impl PyTrainer {
    #[new]
    fn new(config: &PyConfig) -> PyResult<Self> {
        Ok(PyTrainer {
            inner: train::Trainer::new(psformer::Model::new(config.inner.clone()).py()?),
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyTrainer {
            inner: load_checkpoint(path).py()?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(&self.inner, path).py()
    }

    /// Round-trips through the checkpoint encoding.
    fn copy(&self) -> PyResult<Self> {
        Ok(PyTrainer {
            inner: parse_checkpoint(&checkpoint_bytes(&self.inner), "<memory>").py()?,
        })
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.inner.model.cfg.clone(),
        }
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.optim.step
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.model.params.names().to_vec()
    }

    fn train_epoch<'py>(&mut self, py: Python<'py>, scenes: Vec<PyRef<'py, PyPointCloud>>) -> PyResult<Bound<'py, PyDict>> {
        let log = self.inner.train_epoch(&clouds(&scenes)).py()?;
        epoch_dict(py, &log)
    }

    /// Logits of one patch-sized cloud.
    fn logits(&self, cloud: &PyPointCloud) -> PyResult<Vec<f64>> {
        self.inner.model.logits(&cloud.inner).py()
    }

    /// Per-point probabilities for a cloud of any size.
    #[pyo3(signature = (cloud, threshold=0.5))]
    fn predict(&self, cloud: &PyPointCloud, threshold: f64) -> PyResult<Vec<f64>> {
        Ok(predict_cloud(&self.inner.model, &cloud.inner, threshold).py()?.probabilities)
    }

    #[pyo3(signature = (scenes, threshold=0.5, adaptive=false))]
    fn evaluate<'py>(&self, py: Python<'py>, scenes: Vec<PyRef<'py, PyPointCloud>>, threshold: f64, adaptive: bool) -> PyResult<Bound<'py, PyDict>> {
        let m = train::evaluate(&self.inner.model, &clouds(&scenes), threshold, adaptive).py()?;
        metrics_dict(py, &m)
    }
}

#[pyfunction]
#[pyo3(signature = (seed, points=512, regime="default"))]
fn synthetic_scene(seed: u64, points: usize, regime: &str) -> PyResult<PyPointCloud> {
    let regime: Regime = regime.parse().py()?;
    Ok(PyPointCloud {
        inner: gen_synthetic_scene(seed, points, regime).py()?,
    })
}

/// MAE, F-measure, E-measure and IoU of one view.
#[pyfunction]
#[pyo3(signature = (probabilities, labels, threshold=0.5))]
fn metrics<'py>(py: Python<'py>, probabilities: Vec<f64>, labels: Vec<bool>, threshold: f64) -> PyResult<Bound<'py, PyDict>> {
    metrics_dict(py, &MetricsReport::single(&probabilities, &labels, threshold).py()?)
}

#[pyfunction]
fn farthest_point_sample(coords: Vec<[f64; 3]>, count: usize) -> PyResult<Vec<usize>> {
    psformer::pointcloud::farthest_point_sample(&coords, count).py()
}

/// Per-parameter maximum relative errors of a tiny model built from `config`.
#[pyfunction]
fn gradcheck<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<(bool, Bound<'py, PyDict>)> {
    let report = check_gradients(&config.inner, None).py()?;
    let d = PyDict::new(py);
    for p in &report.params {
        d.set_item(&p.name, p.max_rel_error)?;
    }
    Ok((report.passed(), d))
}

#[pymodule]
#[pyo3(name = "psformer")]
fn psformer_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPointCloud>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(synthetic_scene, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(farthest_point_sample, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
