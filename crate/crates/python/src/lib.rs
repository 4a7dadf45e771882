use std::path::PathBuf;

use feddes::datagen::{self, ExDirConfig, GaussianMixture};
use feddes::ensemble;
use feddes::graphbuild::{cmdw_stability, hierarchical_weights};
use feddes::harness::{self, RunOptions};
use feddes::numkernel::Matrix;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(feddes_py, FeddesError, PyException);
create_exception!(feddes_py, ConfigError, FeddesError);

fn to_py(err: feddes::Error) -> PyErr {
    match err {
        feddes::Error::Config(_) => ConfigError::new_err(err.to_string()),
        other => FeddesError::new_err(other.to_string()),
    }
}

/// A labeled dataset held in Rust.
#[pyclass(name = "Dataset", module = "feddes_py", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: datagen::Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    fn new(features: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<Self> {
        let n_classes = labels.iter().max().map_or(0, |m| m + 1);
        let matrix = Matrix::from_rows(&features).map_err(to_py)?;
        let inner = datagen::Dataset::new(matrix, labels, n_classes).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (classes, features, per_class, separation, seed=0))]
    fn gaussian_mixture(classes: usize, features: usize, per_class: usize, separation: f64, seed: u64) -> PyResult<Self> {
        let spec = GaussianMixture {
            classes,
            features,
            per_class,
            separation,
        };
        let inner = datagen::generate_gaussian_mixture(&spec, seed).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, label_column="label"))]
    fn from_csv(path: PathBuf, label_column: &str) -> PyResult<Self> {
        let inner = harness::load_external_csv(&path, label_column).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn to_csv(&self, path: PathBuf) -> PyResult<()> {
        harness::export_csv(&self.inner, &path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes()
    }

    #[getter]
    fn n_features(&self) -> usize {
        self.inner.n_features()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        self.inner.features().iter_rows().map(<[f64]>::to_vec).collect()
    }

    fn imbalance_ratio(&self) -> f64 {
        self.inner.imbalance_ratio()
    }

    /// Label-skewed split into `clients` parts, each holding
    /// `classes_per_client` classes. Returns one dict of
    /// `train`/`val`/`test` index lists per client.
    #[pyo3(signature = (clients, classes_per_client, alpha, seed=0))]
    fn partition<'py>(
        &self,
        py: Python<'py>,
        clients: usize,
        classes_per_client: usize,
        alpha: f64,
        seed: u64,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let cfg = ExDirConfig {
            classes_per_client,
            alpha,
            seed,
        };
        let part = datagen::exdir_partition(&self.inner, &cfg, clients).map_err(to_py)?;
        part.splits
            .iter()
            .map(|s| {
                let d = PyDict::new(py);
                d.set_item("train", &s.train)?;
                d.set_item("val", &s.val)?;
                d.set_item("test", &s.test)?;
                Ok(d)
            })
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n={}, features={}, classes={})",
            self.inner.len(),
            self.inner.n_features(),
            self.inner.n_classes()
        )
    }
}

/// A validated experiment configuration.
#[pyclass(name = "ExperimentConfig", module = "feddes_py", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: harness::ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let inner = harness::ExperimentConfig::from_toml(text).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = harness::ExperimentConfig::load(&path).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(to_py)
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    fn __repr__(&self) -> String {
        format!("ExperimentConfig(seed={}, hash={})", self.inner.seed, &self.inner.hash()[..12])
    }
}

/// Result of a finished run.
#[pyclass(name = "RunResult", module = "feddes_py")]
struct PyRunResult {
    #[pyo3(get)]
    output_dir: PathBuf,
    #[pyo3(get)]
    summary_json: String,
    #[pyo3(get)]
    clients_csv: String,
    #[pyo3(get)]
    calibration_label_changes: Vec<usize>,
    #[pyo3(get)]
    fallback_mismatches: usize,
    report: ensemble::FederationReport,
}

#[pymethods]
impl PyRunResult {
    /// `(mean, std, win_rate)` for `local`, `global` or `feddes`.
    fn method(&self, name: &str) -> PyResult<(f64, f64, f64)> {
        let m = self
            .report
            .methods
            .get(name)
            .ok_or_else(|| PyValueError::new_err(format!("unknown method {name:?}")))?;
        Ok((m.mean, m.std, m.win_rate))
    }

    #[getter]
    fn mean_ensemble_size(&self) -> f64 {
        self.report.ess.mean_size
    }

    #[getter]
    fn mean_ess(&self) -> f64 {
        self.report.ess.mean_ess
    }

    #[getter]
    fn spearman_rho(&self) -> f64 {
        self.report.correlation.rho
    }
}

/// Runs the full pipeline; the GIL is released while it works.
#[pyfunction]
#[pyo3(signature = (config, output_dir=None, workers=1, fresh=false))]
fn run_experiment(
    py: Python<'_>,
    config: &PyConfig,
    output_dir: Option<PathBuf>,
    workers: usize,
    fresh: bool,
) -> PyResult<PyRunResult> {
    let options = RunOptions {
        workers,
        output_dir,
        fresh,
        ..RunOptions::default()
    };
    let cfg = config.inner.clone();
    let outcome = py
        .detach(move || harness::run_experiment(&cfg, &options))
        .map_err(to_py)?;
    Ok(PyRunResult {
        output_dir: outcome.output_dir,
        summary_json: outcome.report.summary_json().map_err(to_py)?,
        clients_csv: outcome.report.client_csv(),
        calibration_label_changes: outcome.calibration_label_changes,
        fallback_mismatches: outcome.report.fallback_mismatches,
        report: outcome.report,
    })
}

/// `(scores, weights, fallback)` from raw competence logits.
#[pyfunction]
fn select(logits: Vec<f64>) -> (Vec<f64>, Vec<f64>, bool) {
    let s = ensemble::decide(&logits);
    (s.scores, s.weights, s.fallback)
}

/// Weighted hard vote; returns `(label, mass per class)`.
#[pyfunction]
fn vote(weights: Vec<f64>, predictions: Vec<usize>, n_classes: usize) -> PyResult<(usize, Vec<f64>)> {
    if weights.len() != predictions.len() || predictions.iter().any(|&p| p >= n_classes) {
        return Err(PyValueError::new_err("weights and predictions must align, labels < n_classes"));
    }
    Ok(ensemble::vote(&weights, &predictions, n_classes))
}

#[pyfunction]
fn effective_ensemble_size(weights: Vec<f64>) -> f64 {
    ensemble::effective_ensemble_size(&weights)
}

/// Spearman correlation, `None` when either side is constant.
#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> PyResult<Option<f64>> {
    if x.len() != y.len() {
        return Err(PyValueError::new_err("x and y differ in length"));
    }
    Ok(ensemble::spearman(&x, &y))
}

/// Neighborhood stability of `target` given its neighbors closest first.
#[pyfunction]
fn stability(neighbors: Vec<Vec<f64>>, target: Vec<f64>) -> f64 {
    let rows: Vec<&[f64]> = neighbors.iter().map(Vec::as_slice).collect();
    cmdw_stability(&rows, &target)
}

/// `(class masses, per-class neighbor weights)`.
#[pyfunction]
#[pyo3(signature = (stability, distances, epsilon=1e-8))]
fn neighbor_weights(stability: Vec<f64>, distances: Vec<Vec<f64>>, epsilon: f64) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    if stability.len() != distances.len() {
        return Err(PyValueError::new_err("one stability value per class is required"));
    }
    Ok(hierarchical_weights(&stability, &distances, epsilon))
}

#[pymodule]
fn feddes_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FeddesError", m.py().get_type::<FeddesError>())?;
    m.add("ConfigError", m.py().get_type::<ConfigError>())?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyRunResult>()?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(select, m)?)?;
    m.add_function(wrap_pyfunction!(vote, m)?)?;
    m.add_function(wrap_pyfunction!(effective_ensemble_size, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(stability, m)?)?;
    m.add_function(wrap_pyfunction!(neighbor_weights, m)?)?;
    Ok(())
}
