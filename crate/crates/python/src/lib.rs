//! Python bindings: configs, runs, the predictor and the small state machines.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use infersim::config::{ExperimentConfig, Perturbation};
use infersim::metrics;
use infersim::model::PriorityLevel;
use infersim::pcie::PcieLinkState;
use infersim::predictor::{FeedbackSample, Predictor};
use infersim::profile::{builtin_profile_set, ProfileSet};
use infersim::scheduler::{AimdConfig, AimdState, PolicyKind};
use infersim::sim;
use infersim::trace::EventTrace;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_priority(s: &str) -> PyResult<PriorityLevel> {
    PriorityLevel::parse(s).ok_or_else(|| value_err(format!("priority must be 'high' or 'low', got {s:?}")))
}

/// A validated set of model profiles.
#[pyclass(name = "ProfileSet", module = "pyinfersim", skip_from_py_object)]
#[derive(Clone)]
struct PyProfileSet {
    inner: ProfileSet,
}

#[pymethods]
impl PyProfileSet {
    /// The built-in six-model set.
    #[staticmethod]
    fn builtin() -> Self {
        Self {
            inner: builtin_profile_set(),
        }
    }

    #[staticmethod]
    fn load_dir(path: PathBuf) -> PyResult<Self> {
        ProfileSet::load_dir(&path).map(|inner| Self { inner }).map_err(value_err)
    }

    fn write_dir(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_dir(&path).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    fn model_ids(&self) -> Vec<String> {
        self.inner.iter().map(|p| p.model_id.clone()).collect()
    }

    /// Isolated end-to-end latency (ms) of `model` at `size`.
    fn isolated_latency(&self, model: &str, size: usize) -> PyResult<f64> {
        let idx = self
            .inner
            .index_of(model)
            .ok_or_else(|| value_err(format!("unknown model {model}")))?;
        let p = self.inner.get(idx);
        if !p.has_size(size) {
            return Err(value_err(format!("{model} has no batch size {size}")));
        }
        Ok(p.inf(size))
    }

    /// Copy with every throughput value scaled by a uniform factor in
    /// `1 ± magnitude_percent/100`.
    fn perturbed(&self, magnitude_percent: f64, seed: u64) -> PyResult<Self> {
        if !(0.0..=100.0).contains(&magnitude_percent) {
            return Err(value_err("magnitude must be within [0, 100]"));
        }
        let v = metrics::perturb_profiles(self.inner.as_slice(), magnitude_percent, seed);
        ProfileSet::new(v).map(|inner| Self { inner }).map_err(value_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Experiment configuration. Round-trips through TOML.
#[pyclass(name = "Config", module = "pyinfersim", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    /// The overloaded six-model Poisson workload on four GPUs.
    #[staticmethod]
    #[pyo3(signature = (seed = 0))]
    fn overload(seed: u64) -> Self {
        Self {
            inner: ExperimentConfig::overload(seed),
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        ExperimentConfig::parse(text).map(|inner| Self { inner }).map_err(value_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ExperimentConfig::load(&path).map(|inner| Self { inner }).map_err(value_err)
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.seed = v;
    }

    #[getter]
    fn duration_ms(&self) -> f64 {
        self.inner.duration_ms
    }

    #[setter]
    fn set_duration_ms(&mut self, v: f64) {
        self.inner.duration_ms = v;
    }

    #[getter]
    fn num_gpus(&self) -> usize {
        self.inner.num_gpus
    }

    #[setter]
    fn set_num_gpus(&mut self, v: usize) {
        self.inner.num_gpus = v;
    }

    #[getter]
    fn policy(&self) -> &'static str {
        self.inner.policy.name()
    }

    #[setter]
    fn set_policy(&mut self, name: &str) -> PyResult<()> {
        self.inner.policy = PolicyKind::parse(name).ok_or_else(|| value_err(format!("unknown policy {name}")))?;
        Ok(())
    }

    /// Scheduler-side profiles perturbed by `magnitude_percent`; `None` clears.
    #[pyo3(signature = (magnitude_percent, seed = 0))]
    fn set_profile_perturbation(&mut self, magnitude_percent: Option<f64>, seed: u64) {
        self.inner.profile_perturbation = magnitude_percent.map(|m| Perturbation {
            magnitude_percent: m,
            seed,
        });
    }

    fn validate(&self) -> PyResult<()> {
        let profiles = self.inner.profiles().map_err(value_err)?;
        self.inner.validate(&profiles).map_err(value_err)
    }
}

/// Outcome of one simulation run.
#[pyclass(name = "RunResult", module = "pyinfersim")]
struct PyRunResult {
    out: sim::SimOutput,
}

#[pymethods]
impl PyRunResult {
    /// Headline metrics as a JSON document.
    fn summary_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.out.report.summary()).map_err(value_err)
    }

    #[getter]
    fn hp_violation_pct(&self) -> f64 {
        self.out.report.high.violation_pct
    }

    #[getter]
    fn lp_violation_pct(&self) -> f64 {
        self.out.report.low.violation_pct
    }

    #[getter]
    fn batches(&self) -> usize {
        self.out.report.batches
    }

    /// Signed relative interference prediction error per batch.
    fn intf_errors(&self) -> Vec<f64> {
        self.out.report.intf_error.clone()
    }

    fn trace_hash(&self) -> String {
        self.out.trace.hash()
    }

    fn trace_csv(&self) -> PyResult<String> {
        String::from_utf8(self.out.trace.to_csv()).map_err(value_err)
    }

    fn write_trace(&self, path: PathBuf) -> PyResult<()> {
        self.out.trace.write(&path).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    /// The predictor as it stood at the end of the run.
    fn predictor(&self) -> PyPredictor {
        PyPredictor {
            inner: self.out.predictor.clone(),
        }
    }
}

/// Runs one experiment. The GIL is released while simulating.
#[pyfunction]
fn run(py: Python<'_>, config: &PyConfig) -> PyResult<PyRunResult> {
    let cfg = config.inner.clone();
    let out = py.detach(move || sim::run(&cfg)).map_err(value_err)?;
    Ok(PyRunResult { out })
}

/// Metrics summary (JSON) recomputed from a trace CSV file.
#[pyfunction]
#[pyo3(signature = (path, window_ms = 1000.0))]
fn report(path: PathBuf, window_ms: f64) -> PyResult<String> {
    if !(window_ms > 0.0) {
        return Err(value_err("window must be positive"));
    }
    let trace = EventTrace::read(&path).map_err(value_err)?;
    serde_json::to_string(&metrics::compute_metrics(&trace, window_ms).summary()).map_err(value_err)
}

/// Nearest-rank percentile; `None` for an empty list.
#[pyfunction]
fn percentile(values: Vec<f64>, p: f64) -> Option<f64> {
    metrics::percentile(&values, p)
}

/// Online interference predictor.
#[pyclass(name = "Predictor", module = "pyinfersim", skip_from_py_object)]
#[derive(Clone)]
struct PyPredictor {
    inner: Predictor,
}

#[pymethods]
impl PyPredictor {
    #[new]
    #[pyo3(signature = (metric_count = 5))]
    fn new(metric_count: usize) -> Self {
        Self {
            inner: Predictor::initial(metric_count),
        }
    }

    #[staticmethod]
    fn from_checkpoint(text: &str) -> PyResult<Self> {
        Predictor::from_checkpoint(text).map(|inner| Self { inner }).map_err(value_err)
    }

    fn to_checkpoint(&self) -> String {
        self.inner.to_checkpoint()
    }

    /// Interference degree for a co-location aggregate.
    fn predict(&self, m_avg: Vec<f64>, self_cmp: f64, self_mem: f64, priority: &str) -> PyResult<f64> {
        self.inner
            .predict_intf(&m_avg, self_cmp, self_mem, parse_priority(priority)?)
            .map_err(value_err)
    }

    /// One online step on a measured slowdown. Returns the prediction made
    /// before the step.
    fn update(&mut self, m_avg: Vec<f64>, self_cmp: f64, self_mem: f64, priority: &str, actual: f64) -> PyResult<f64> {
        if !(actual > 0.0) {
            return Err(value_err("measured interference degree must be positive"));
        }
        let sample = FeedbackSample {
            batch_id: self.inner.optimizer.t,
            m_avg_twa: m_avg,
            m_self_cmp: self_cmp,
            m_self_mem: self_mem,
            priority: parse_priority(priority)?,
            intf_predicted: f64::NAN,
            intf_actual: actual,
        };
        self.inner.update(&sample).map(|o| o.prediction).map_err(value_err)
    }

    /// Flat parameters `k, b, C, w.., w_cmp, w_mem, coeff_high, coeff_low`.
    fn params(&self) -> Vec<f64> {
        self.inner.params.to_vec()
    }

    #[getter]
    fn steps(&self) -> u64 {
        self.inner.optimizer.t
    }
}

/// FIFO reservation model of one GPU's upload link.
#[pyclass(name = "PcieLink", module = "pyinfersim")]
struct PyPcieLink {
    inner: PcieLinkState,
}

#[pymethods]
impl PyPcieLink {
    #[new]
    #[pyo3(signature = (t_available = 0.0))]
    fn new(t_available: f64) -> Self {
        Self {
            inner: PcieLinkState::new(t_available),
        }
    }

    fn estimate_upstream_delay(&self, now: f64) -> f64 {
        self.inner.estimate_upstream_delay(now)
    }

    /// Reserves the link; returns `(start, end)`.
    fn reserve(&mut self, now: f64, t_htod: f64) -> PyResult<(f64, f64)> {
        let r = self.inner.reserve(now, t_htod).map_err(value_err)?;
        Ok((r.start, r.end))
    }

    fn calibrate(&mut self, actual_end: f64) -> PyResult<()> {
        self.inner.calibrate(actual_end).map_err(value_err)
    }

    #[getter]
    fn t_available(&self) -> f64 {
        self.inner.t_available
    }
}

/// Additive-increase cap on low-priority throughput, reset on a
/// high-priority miss.
#[pyclass(name = "Aimd", module = "pyinfersim")]
struct PyAimd {
    inner: AimdState,
}

#[pymethods]
impl PyAimd {
    #[new]
    #[pyo3(signature = (now = 0.0))]
    fn new(now: f64) -> Self {
        Self {
            inner: AimdState::new(AimdConfig::default(), now),
        }
    }

    fn tick(&mut self, now: f64) -> bool {
        self.inner.tick(now)
    }

    fn on_hp_violation(&mut self) -> bool {
        self.inner.reset_on_hp_violation()
    }

    #[getter]
    fn c_low(&self) -> f64 {
        self.inner.c_low
    }
}

#[pymodule]
fn pyinfersim(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyProfileSet>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyRunResult>()?;
    m.add_class::<PyPredictor>()?;
    m.add_class::<PyPcieLink>()?;
    m.add_class::<PyAimd>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(percentile, m)?)?;
    m.add("POLICIES", PolicyKind::ALL.map(PolicyKind::name).to_vec())?;
    Ok(())
}
