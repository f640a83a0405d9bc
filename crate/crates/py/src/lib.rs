//! Python bindings: config handling, the noise schedule, the quantizer,
//! evaluation metrics and the CLI stages.

use std::path::PathBuf;

use pyo3::exceptions::{PyFloatingPointError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use trajdiff::classify::{self, MetricsReport, MetricsRow};
use trajdiff::cli::{self, Context};
use trajdiff::cohort::Label;
use trajdiff::config;
use trajdiff::diffusion;
use trajdiff::guidance;
use trajdiff::{pipeline, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) => PyValueError::new_err(e.to_string()),
        Error::NonFinite(_) => PyFloatingPointError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Experiment configuration. `RunConfig()` gives the defaults.
#[pyclass(name = "RunConfig", from_py_object)]
#[derive(Clone)]
pub struct PyRunConfig {
    inner: config::RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    fn new() -> Self {
        Self { inner: config::RunConfig::default() }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        config::RunConfig::from_toml(text).map(|inner| Self { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        config::RunConfig::load(&path).map(|inner| Self { inner }).map_err(to_py)
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    /// SHA-256 of the canonical config, ignoring the output directory.
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

    #[getter]
    fn output_dir(&self) -> String {
        self.inner.output_dir.clone()
    }

    #[setter]
    fn set_output_dir(&mut self, dir: String) {
        self.inner.output_dir = dir;
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(seed={}, hash={})", self.inner.seed, &self.inner.hash()[..12])
    }
}

#[pyclass(name = "NoiseSchedule")]
pub struct PyNoiseSchedule {
    inner: diffusion::NoiseSchedule,
}

#[pymethods]
impl PyNoiseSchedule {
    #[new]
    #[pyo3(signature = (steps=40, beta_start=1e-3, beta_end=0.2))]
    fn new(steps: usize, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        diffusion::NoiseSchedule::new(steps, beta_start, beta_end)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    fn betas(&self) -> Vec<f64> {
        self.inner.betas().to_vec()
    }

    fn alpha_bars(&self) -> Vec<f64> {
        self.inner.alpha_bars().to_vec()
    }

    /// `z_t` for a given noise draw, `1 <= t <= steps`.
    fn forward_diffuse(&self, z0: Vec<f64>, t: usize, epsilon: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.forward_diffuse(&z0, t, &epsilon).map_err(to_py)
    }
}

#[pyclass(name = "QuantizerSpec")]
pub struct PyQuantizerSpec {
    inner: guidance::QuantizerSpec,
}

#[pymethods]
impl PyQuantizerSpec {
    #[new]
    fn new(lower: Vec<f64>, upper: Vec<f64>, bins: usize) -> PyResult<Self> {
        guidance::QuantizerSpec::new(lower, upper, bins)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    #[getter]
    fn vocab(&self) -> usize {
        self.inner.vocab()
    }

    fn quantize(&self, z: Vec<f64>) -> PyResult<Vec<usize>> {
        self.inner.quantize(&z).map_err(to_py)
    }

    fn dequantize(&self, tokens: Vec<usize>) -> PyResult<Vec<f64>> {
        self.inner.dequantize(&tokens).map_err(to_py)
    }
}

fn labels(pmci: &[bool]) -> Vec<Label> {
    pmci.iter().map(|&p| if p { Label::Pmci } else { Label::Smci }).collect()
}

fn report_dict<'py>(py: Python<'py>, m: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("acc", m.acc)?;
    d.set_item("sen", m.sen)?;
    d.set_item("spe", m.spe)?;
    d.set_item("auc", m.auc)?;
    d.set_item("tp", m.tp)?;
    d.set_item("fp", m.fp)?;
    d.set_item("tn", m.tn)?;
    d.set_item("fn", m.fn_)?;
    d.set_item("n", m.n)?;
    Ok(d)
}

fn rows_list<'py>(py: Python<'py>, rows: &[MetricsRow]) -> PyResult<Vec<Bound<'py, PyDict>>> {
    rows.iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("run_id", &r.run_id)?;
            d.set_item("mode", &r.mode)?;
            d.set_item("acc", r.acc)?;
            d.set_item("sen", r.sen)?;
            d.set_item("spe", r.spe)?;
            d.set_item("auc", r.auc)?;
            d.set_item("n", r.n)?;
            d.set_item("seed", r.seed)?;
            d.set_item("config_hash", &r.config_hash)?;
            Ok(d)
        })
        .collect()
}

/// Rank AUC with mid-ranks for ties; `None` if a class is missing.
#[pyfunction]
fn rank_auc(pmci: Vec<bool>, scores: Vec<f64>) -> PyResult<Option<f64>> {
    if pmci.len() != scores.len() {
        return Err(PyValueError::new_err("labels and scores differ in length"));
    }
    Ok(classify::rank_auc(&pmci, &scores))
}

#[pyfunction]
#[pyo3(signature = (pmci, probs, threshold=0.5))]
fn compute_metrics<'py>(py: Python<'py>, pmci: Vec<bool>, probs: Vec<f64>, threshold: f64) -> PyResult<Bound<'py, PyDict>> {
    let m = classify::compute_metrics(&labels(&pmci), &probs, threshold).map_err(to_py)?;
    report_dict(py, &m)
}

/// Returns `(train, val, test)` sizes.
#[pyfunction]
fn gen_cohort(py: Python<'_>, config: PyRunConfig, out: PathBuf) -> PyResult<(usize, usize, usize)> {
    let ctx = Context::new(config.inner, out);
    let s = py.detach(|| cli::cmd_gen_cohort(&ctx)).map_err(to_py)?;
    Ok((s.train.len(), s.val.len(), s.test.len()))
}

/// Trains from `out/cohort/train.jsonl`; returns the checkpoint path.
#[pyfunction]
fn train(py: Python<'_>, config: PyRunConfig, out: PathBuf) -> PyResult<PathBuf> {
    let ctx = Context::new(config.inner, out);
    py.detach(|| cli::cmd_train(&ctx)).map_err(to_py)?;
    Ok(ctx.checkpoint_path())
}

/// Returns the number of candidates drawn per step.
#[pyfunction]
#[pyo3(signature = (config, out, guided=true))]
fn sample(py: Python<'_>, config: PyRunConfig, out: PathBuf, guided: bool) -> PyResult<usize> {
    let ctx = Context::new(config.inner, out);
    py.detach(|| cli::cmd_sample(&ctx, guided)).map(|g| g.n).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (config, out, run_id="py"))]
fn eval<'py>(py: Python<'py>, config: PyRunConfig, out: PathBuf, run_id: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let ctx = Context::new(config.inner, out);
    let rows = py.detach(|| cli::cmd_eval(&ctx, run_id)).map_err(to_py)?;
    rows_list(py, &rows)
}

/// All stages in memory, nothing written.
#[pyfunction]
#[pyo3(signature = (config, run_id="py"))]
fn run_pipeline<'py>(py: Python<'py>, config: PyRunConfig, run_id: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let rows = py.detach(|| pipeline::run_pipeline(&config.inner, run_id)).map_err(to_py)?;
    rows_list(py, &rows)
}

#[pymodule]
#[pyo3(name = "trajdiff")]
fn trajdiff_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyNoiseSchedule>()?;
    m.add_class::<PyQuantizerSpec>()?;
    m.add_function(wrap_pyfunction!(rank_auc, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(gen_cohort, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    m.add_function(wrap_pyfunction!(eval, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
