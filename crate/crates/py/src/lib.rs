//! Python bindings for the constrained architecture search engine.
//!
//! The module exposes three layers:
//!
//! * `Tensor` — the reverse-mode autodiff core (element type `f64`), enough
//!   to build small differentiable expressions and inspect gradients;
//! * `Genotype` — discrete architectures with JSON round-trip, validation,
//!   and exact parameter / MAC accounting;
//! * pipeline functions — `synth_dataset`, `run_search`, `run_retrain`,
//!   `run_eval`, all driven by the same JSON experiment config the CLI uses,
//!   returning the run report as a JSON string.

use std::path::Path;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ctnas_core::data::SynthConfig;
use ctnas_core::genotype::{compile, CompileConfig, Genotype};
use ctnas_core::harness::{cmd_eval, cmd_retrain, cmd_search, cmd_synth, ExperimentConfig};
use ctnas_core::space::SearchSpace;
use ctnas_core::tensor::{self, Tensor};
use ctnas_core::Error;

/// Map engine errors onto Python exceptions: configuration and input problems
/// become `ValueError`, everything else (divergence, I/O, checkpoint damage)
/// becomes `RuntimeError`.
fn to_py_err(e: Error) -> PyErr {
    match &e {
        Error::Config(_) | Error::Json(_) | Error::Data(_) | Error::Genotype(_)
        | Error::Shape(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// A dense tensor with reverse-mode autodiff, element type `f64`.
///
/// The autodiff graph is reference-counted and thread-confined, hence
/// `unsendable`: the interpreter enforces single-thread access.
#[pyclass(name = "Tensor", unsendable)]
#[derive(Clone)]
pub struct PyTensor {
    inner: Tensor<f64>,
}

impl PyTensor {
    fn wrap(inner: Tensor<f64>) -> Self {
        PyTensor { inner }
    }
}

#[pymethods]
impl PyTensor {
    /// Build a tensor from a shape and a flat row-major data vector.
    /// `requires_grad=True` marks it as a trainable leaf.
    #[new]
    #[pyo3(signature = (shape, data, requires_grad = false))]
    fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> PyResult<Self> {
        let t = if requires_grad {
            Tensor::param(shape, data)
        } else {
            Tensor::from_vec(shape, data)
        }
        .map_err(to_py_err)?;
        Ok(PyTensor::wrap(t))
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn requires_grad(&self) -> bool {
        self.inner.requires_grad()
    }

    /// Flat row-major copy of the current values.
    fn data(&self) -> Vec<f64> {
        self.inner.data_vec()
    }

    /// Flat copy of the accumulated gradient, or `None` before `backward`.
    fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad_vec()
    }

    /// The single element of a one-element tensor.
    fn item(&self) -> PyResult<f64> {
        if self.inner.numel() != 1 {
            return Err(PyValueError::new_err(format!(
                "item() requires a one-element tensor, got {} elements",
                self.inner.numel()
            )));
        }
        Ok(self.inner.item())
    }

    /// Run reverse-mode accumulation from this (scalar) tensor.
    fn backward(&self) -> PyResult<()> {
        self.inner.backward().map_err(to_py_err)
    }

    /// Clear the accumulated gradient on this leaf.
    fn zero_grad(&self) {
        self.inner.zero_grad();
    }

    fn add(&self, other: &PyTensor) -> PyResult<PyTensor> {
        tensor::add(&self.inner, &other.inner)
            .map(PyTensor::wrap)
            .map_err(to_py_err)
    }

    fn sub(&self, other: &PyTensor) -> PyResult<PyTensor> {
        tensor::sub(&self.inner, &other.inner)
            .map(PyTensor::wrap)
            .map_err(to_py_err)
    }

    fn mul(&self, other: &PyTensor) -> PyResult<PyTensor> {
        tensor::mul(&self.inner, &other.inner)
            .map(PyTensor::wrap)
            .map_err(to_py_err)
    }

    /// Elementwise `a * x + b` with scalar constants.
    fn affine(&self, a: f64, b: f64) -> PyTensor {
        PyTensor::wrap(tensor::affine(&self.inner, a, b))
    }

    fn relu(&self) -> PyTensor {
        PyTensor::wrap(tensor::relu(&self.inner))
    }

    /// Softmax along `axis`.
    fn softmax(&self, axis: usize) -> PyResult<PyTensor> {
        tensor::softmax(&self.inner, axis)
            .map(PyTensor::wrap)
            .map_err(to_py_err)
    }

    /// Sum of all elements (scalar tensor).
    fn sum(&self) -> PyTensor {
        PyTensor::wrap(tensor::sum_all(&self.inner))
    }

    /// Mean of all elements (scalar tensor).
    fn mean(&self) -> PyResult<PyTensor> {
        tensor::mean_all(&self.inner)
            .map(PyTensor::wrap)
            .map_err(to_py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Tensor(shape={:?}, requires_grad={})",
            self.inner.shape(),
            self.inner.requires_grad()
        )
    }
}

/// Mean cross-entropy between `[batch, classes]` logits and integer labels.
#[pyfunction]
fn cross_entropy(logits: &PyTensor, labels: Vec<usize>) -> PyResult<PyTensor> {
    tensor::nn::cross_entropy(&logits.inner, &labels)
        .map(PyTensor::wrap)
        .map_err(to_py_err)
}

/// A discrete cell-pair architecture.
#[pyclass(name = "Genotype")]
#[derive(Clone)]
pub struct PyGenotype {
    inner: Genotype,
}

#[pymethods]
impl PyGenotype {
    /// Parse a genotype from its JSON serialization.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Genotype::from_json(text)
            .map(|inner| PyGenotype { inner })
            .map_err(to_py_err)
    }

    /// JSON serialization (stable field order, round-trips exactly).
    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    /// Retained inputs of the normal cell: per node, a list of
    /// `(operator_name, source_node)` pairs.
    #[getter]
    fn normal(&self) -> Vec<Vec<(String, usize)>> {
        self.inner.normal.clone()
    }

    /// Retained inputs of the reduction cell, same layout as `normal`.
    #[getter]
    fn reduce(&self) -> Vec<Vec<(String, usize)>> {
        self.inner.reduce.clone()
    }

    #[getter]
    fn blocks(&self) -> usize {
        self.inner.meta.blocks
    }

    #[getter]
    fn nodes(&self) -> usize {
        self.inner.meta.nodes
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.meta.channels
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.meta.classes
    }

    #[getter]
    fn space_id(&self) -> String {
        self.inner.meta.space_id.clone()
    }

    /// Check the genotype against its operator space.
    fn validate(&self) -> PyResult<()> {
        let space = SearchSpace::by_id(&self.inner.meta.space_id).map_err(to_py_err)?;
        self.inner.validate(&space).map_err(to_py_err)
    }

    /// Exact trainable-parameter count of the compiled network for an input
    /// of `input_slices` windows by `input_time` samples.
    fn param_count(&self, input_slices: usize, input_time: usize) -> PyResult<u64> {
        let space = SearchSpace::by_id(&self.inner.meta.space_id).map_err(to_py_err)?;
        let cfg = CompileConfig::from_meta(&self.inner.meta, input_slices, input_time);
        self.inner.count_params(&space, &cfg).map_err(to_py_err)
    }

    /// Multiply-accumulate count per input sample for the compiled network.
    fn mac_count(&self, input_slices: usize, input_time: usize) -> PyResult<u64> {
        let space = SearchSpace::by_id(&self.inner.meta.space_id).map_err(to_py_err)?;
        let cfg = CompileConfig::from_meta(&self.inner.meta, input_slices, input_time);
        let net: ctnas_core::genotype::CompiledNet<f64> =
            compile(&self.inner, &space, &cfg, 0).map_err(to_py_err)?;
        net.count_macs().map_err(to_py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Genotype(space={}, blocks={}, nodes={}, channels={}, classes={})",
            self.inner.meta.space_id,
            self.inner.meta.blocks,
            self.inner.meta.nodes,
            self.inner.meta.channels,
            self.inner.meta.classes
        )
    }
}

fn parse_config(config_json: &str) -> PyResult<ExperimentConfig> {
    ExperimentConfig::from_json(config_json).map_err(to_py_err)
}

fn report_json(report: &ctnas_core::harness::RunReport) -> PyResult<String> {
    serde_json::to_string_pretty(report)
        .map_err(|e| PyRuntimeError::new_err(format!("report serialization: {e}")))
}

/// The full experiment config with every field at its default, as pretty
/// JSON. Useful as a template: edit fields and pass to `run_search`.
#[pyfunction]
fn default_config() -> PyResult<String> {
    serde_json::to_string_pretty(&ExperimentConfig::default())
        .map_err(|e| PyRuntimeError::new_err(format!("config serialization: {e}")))
}

/// Operator names of a search space (`"desk8"` or `"full"`).
#[pyfunction]
fn space_operators(space_id: &str) -> PyResult<Vec<String>> {
    SearchSpace::by_id(space_id)
        .map(|s| s.names())
        .map_err(to_py_err)
}

/// Generate a synthetic multichannel dataset and write it under `out_dir` in
/// the native format. `config_json` holds a synth config (any subset of
/// fields; omitted ones take defaults). Returns the dataset directory path.
#[pyfunction]
#[pyo3(signature = (out_dir, config_json = None))]
fn synth_dataset(out_dir: &str, config_json: Option<&str>) -> PyResult<String> {
    let cfg: SynthConfig = match config_json {
        Some(text) => serde_json::from_str(text)
            .map_err(|e| PyValueError::new_err(format!("synth config: {e}")))?,
        None => SynthConfig::default(),
    };
    let path = cmd_synth(&cfg, Path::new(out_dir)).map_err(to_py_err)?;
    Ok(path.display().to_string())
}

/// Run the constrained architecture search described by a JSON experiment
/// config. Writes genotype, trajectory, and report under the config's
/// `out_dir` and returns the run report as JSON.
#[pyfunction]
fn run_search(config_json: &str) -> PyResult<String> {
    let cfg = parse_config(config_json)?;
    let report = cmd_search(&cfg).map_err(to_py_err)?;
    report_json(&report)
}

/// Retrain a derived genotype from scratch per the config's retrain section.
/// Writes a checkpoint and report under `out_dir`; returns the report JSON.
#[pyfunction]
fn run_retrain(config_json: &str, genotype_path: &str) -> PyResult<String> {
    let cfg = parse_config(config_json)?;
    let report = cmd_retrain(&cfg, Path::new(genotype_path)).map_err(to_py_err)?;
    report_json(&report)
}

/// Evaluate a retrained checkpoint on the config's validation split;
/// returns the report JSON with accuracy, kappa, and confusion matrix.
#[pyfunction]
fn run_eval(config_json: &str, genotype_path: &str, checkpoint_path: &str) -> PyResult<String> {
    let cfg = parse_config(config_json)?;
    let report = cmd_eval(&cfg, Path::new(genotype_path), Path::new(checkpoint_path))
        .map_err(to_py_err)?;
    report_json(&report)
}

#[pymodule]
fn ctnas(m: &Bound<'_, PyModule>) -> PyResult<()> {
    ctnas_core::threads::init_thread_pool();
    m.add_class::<PyTensor>()?;
    m.add_class::<PyGenotype>()?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(space_operators, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(run_search, m)?)?;
    m.add_function(wrap_pyfunction!(run_retrain, m)?)?;
    m.add_function(wrap_pyfunction!(run_eval, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    // These tests exercise the glue that doesn't need a live interpreter;
    // python/smoke_test.py covers the module end to end.

    #[test]
    fn default_config_round_trips_through_serde() {
        let text = serde_json::to_string_pretty(&ExperimentConfig::default()).unwrap();
        let parsed = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(parsed.space_id, "desk8");
        assert_eq!(parsed.search.epochs, 30);
    }

    #[test]
    fn error_mapping_partitions_variants() {
        // Config-class errors become ValueError, operational ones RuntimeError.
        // Inspecting a PyErr requires a live interpreter; embed one (the crate
        // links libpython, so tests can).
        pyo3::prepare_freethreaded_python();
        Python::with_gil(|py| {
            let cfg_err = to_py_err(Error::Config("bad".into()));
            let run_err = to_py_err(Error::Diverged {
                epoch: 0,
                step: 0,
                detail: "nan".into(),
            });
            assert!(cfg_err.is_instance_of::<PyValueError>(py));
            assert!(run_err.is_instance_of::<PyRuntimeError>(py));
        });
    }
}
