//! Python bindings: load metrics, feature reductions, flow hashing and
//! selection, the server model, and whole experiment runs.

use aquarius_core::cluster_sim::{ServerSpec, ServerState, SubmitOutcome};
use aquarius_core::estimator_loop;
use aquarius_core::experiment::{self, ExperimentConfig, OutputSet, RunError};
use aquarius_core::feature_pipeline::{self, Reductions};
use aquarius_core::metrics;
use aquarius_core::packet_model::FiveTuple;
use aquarius_core::policies::{self, MaglevTable, DEFAULT_TABLE_SIZE};
use aquarius_core::telemetry;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::PathBuf;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn run_err(e: RunError) -> PyErr {
    match e {
        RunError::Config(_) => PyValueError::new_err(e.to_string()),
        RunError::Invariant(_) => PyRuntimeError::new_err(e.to_string()),
        RunError::Io(_) => PyOSError::new_err(e.to_string()),
    }
}

fn tuple(src_ip: u32, src_port: u16, dst_vip: u32, dst_port: u16, proto: u8) -> FiveTuple {
    FiveTuple { src_ip, src_port, dst_vip, dst_port, proto }
}

/// Jain's fairness index of a list of loads.
#[pyfunction]
fn jain_fairness(values: Vec<f64>) -> f64 {
    metrics::jain_fairness(&values)
}

/// Max-to-mean ratio of a list of loads.
#[pyfunction]
fn overprovision(values: Vec<f64>) -> f64 {
    metrics::overprovision(&values)
}

/// Reduces one window of samples to (avg, p90, std, decay_avg, decay_p90).
/// `prev` is the previous window's tuple for the decayed statistics.
#[pyfunction]
#[pyo3(signature = (samples, prev=None))]
fn reduce_channel(samples: Vec<f64>, prev: Option<[f64; 5]>) -> [f64; 5] {
    let prev = prev.map(|p| Reductions { avg: p[0], p90: p[1], std: p[2], decay_avg: p[3], decay_p90: p[4] });
    feature_pipeline::reduce_channel(&samples, prev.as_ref()).as_array()
}

/// Column names of the reduced feature vector.
#[pyfunction]
fn feature_names() -> Vec<String> {
    feature_pipeline::feature_names()
}

#[pyfunction]
#[pyo3(signature = (src_ip, src_port, dst_vip, dst_port=80, proto=6))]
fn flow_hash(src_ip: u32, src_port: u16, dst_vip: u32, dst_port: u16, proto: u8) -> u64 {
    policies::flow_hash(&tuple(src_ip, src_port, dst_vip, dst_port, proto))
}

/// ECMP choice of a backend from `active` for one connection.
#[pyfunction]
#[pyo3(signature = (active, src_ip, src_port, dst_vip, dst_port=80, proto=6))]
fn ecmp_pick(active: Vec<u32>, src_ip: u32, src_port: u16, dst_vip: u32, dst_port: u16, proto: u8) -> PyResult<u32> {
    policies::ecmp_pick(&tuple(src_ip, src_port, dst_vip, dst_port, proto), &active).map_err(value_err)
}

/// Maps predicted busy threads per backend to integer weights in [1, w_max].
#[pyfunction]
#[pyo3(signature = (predictions, w_max=64))]
fn weights_from_predictions(predictions: BTreeMap<u32, f64>, w_max: u32) -> PyResult<BTreeMap<u32, u32>> {
    if predictions.is_empty() || predictions.values().any(|p| !p.is_finite()) {
        return Err(PyValueError::new_err("predictions must be a non-empty map of finite values"));
    }
    if !(1..=64).contains(&w_max) {
        return Err(PyValueError::new_err("w_max must be in [1, 64]"));
    }
    Ok(estimator_loop::weights_from_predictions(&predictions, w_max))
}

/// Weighted Maglev lookup table.
#[pyclass(name = "MaglevTable", frozen)]
struct PyMaglevTable {
    inner: MaglevTable,
}

#[pymethods]
impl PyMaglevTable {
    #[new]
    #[pyo3(signature = (backends, weights=None, table_size=DEFAULT_TABLE_SIZE))]
    fn new(backends: Vec<u32>, weights: Option<Vec<u32>>, table_size: usize) -> PyResult<Self> {
        let weights = weights.unwrap_or_else(|| vec![1; backends.len()]);
        let inner = MaglevTable::build_weighted(&backends, &weights, table_size).map_err(value_err)?;
        Ok(PyMaglevTable { inner })
    }

    fn lookup(&self, hash: u64) -> u32 {
        self.inner.lookup(hash)
    }

    /// Number of table entries owned by `dip`.
    fn share(&self, dip: u32) -> usize {
        self.inner.share(dip)
    }

    fn entries(&self) -> Vec<u32> {
        self.inner.entries().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Fixed-capacity uniform sample of one time window.
#[pyclass(name = "ReservoirSampler")]
struct PyReservoirSampler {
    inner: telemetry::ReservoirSampler,
    rng: ChaCha8Rng,
}

#[pymethods]
impl PyReservoirSampler {
    #[new]
    #[pyo3(signature = (capacity, window, start=0.0, seed=0))]
    fn new(capacity: usize, window: f64, start: f64, seed: u64) -> PyResult<Self> {
        if capacity == 0 || window <= 0.0 || !window.is_finite() {
            return Err(PyValueError::new_err("capacity and window must be positive"));
        }
        Ok(PyReservoirSampler {
            inner: telemetry::ReservoirSampler::new(capacity, window, start),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn insert(&mut self, value: f64, now: f64) {
        self.inner.insert(value, now, &mut self.rng);
    }

    fn reset(&mut self, window_start: f64) {
        self.inner.reset(window_start);
    }

    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    #[getter]
    fn seen(&self) -> u64 {
        self.inner.seen()
    }

    #[getter]
    fn window_start(&self) -> f64 {
        self.inner.window_start()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Processor-sharing server with a worker pool and a bounded backlog.
#[pyclass(name = "Server")]
struct PyServer {
    inner: ServerState,
}

#[pymethods]
impl PyServer {
    #[new]
    #[pyo3(signature = (n_cpu, dip=0))]
    fn new(n_cpu: u32, dip: u32) -> PyResult<Self> {
        if n_cpu == 0 {
            return Err(PyValueError::new_err("n_cpu must be positive"));
        }
        Ok(PyServer { inner: ServerState::new(ServerSpec::new(dip, n_cpu)) })
    }

    /// Offers a job; returns "admitted", "queued" or "rst_overflow". The
    /// server is advanced to `now` first.
    fn submit(&mut self, job_id: u64, work: f64, now: f64) -> PyResult<(&'static str, Vec<(u64, f64)>)> {
        if work <= 0.0 || !work.is_finite() || now < self.inner.clock() {
            return Err(PyValueError::new_err("work must be positive and time must not go backwards"));
        }
        let done = self.advance_to(now);
        let outcome = match self.inner.submit(job_id, work, now) {
            SubmitOutcome::Admitted => "admitted",
            SubmitOutcome::Queued => "queued",
            SubmitOutcome::RstOverflow => "rst_overflow",
        };
        Ok((outcome, done))
    }

    /// Runs the server to `until`; returns (job_id, completion_time) pairs.
    fn advance(&mut self, until: f64) -> PyResult<Vec<(u64, f64)>> {
        if until < self.inner.clock() {
            return Err(PyValueError::new_err("time must not go backwards"));
        }
        Ok(self.advance_to(until))
    }

    /// (cpu_usage, busy_threads) at the server clock.
    fn ground_truth(&self) -> (f64, u32) {
        let g = self.inner.ground_truth(self.inner.clock());
        (g.cpu_usage, g.busy_threads)
    }

    #[getter]
    fn clock(&self) -> f64 {
        self.inner.clock()
    }

    #[getter]
    fn queued(&self) -> usize {
        self.inner.queued()
    }
}

impl PyServer {
    fn advance_to(&mut self, until: f64) -> Vec<(u64, f64)> {
        self.inner.advance(until).into_iter().map(|c| (c.flow_id, c.time)).collect()
    }
}

/// Runs one experiment from a JSON config and returns the report as JSON.
/// With `out`, also writes the usual output files there.
#[pyfunction]
#[pyo3(signature = (config_json, out=None))]
fn run_experiment(py: Python<'_>, config_json: &str, out: Option<PathBuf>) -> PyResult<String> {
    let config: ExperimentConfig = serde_json::from_str(config_json).map_err(value_err)?;
    let result = py.detach(|| experiment::run_experiment(&config)).map_err(run_err)?;
    if let Some(dir) = out {
        experiment::write_outputs(&result, &dir, OutputSet::Full).map_err(run_err)?;
    }
    serde_json::to_string(&result.report).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
fn aquarius(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(jain_fairness, m)?)?;
    m.add_function(wrap_pyfunction!(overprovision, m)?)?;
    m.add_function(wrap_pyfunction!(reduce_channel, m)?)?;
    m.add_function(wrap_pyfunction!(feature_names, m)?)?;
    m.add_function(wrap_pyfunction!(flow_hash, m)?)?;
    m.add_function(wrap_pyfunction!(ecmp_pick, m)?)?;
    m.add_function(wrap_pyfunction!(weights_from_predictions, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_class::<PyMaglevTable>()?;
    m.add_class::<PyReservoirSampler>()?;
    m.add_class::<PyServer>()?;
    m.add("N_FEATURES", feature_pipeline::N_FEATURES)?;
    Ok(())
}
