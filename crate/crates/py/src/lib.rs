//! Python module `scenestream_py`: an in-process server, scenario runs and a few pure helpers.

use std::sync::{Arc, Mutex};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use scenestream::hash::stress::{self, StressConfig, StressReport};
use scenestream::hash::{BlockKey, ConcurrentHashMap, ConcurrentHashSet, InsertPolicy};
use scenestream::mc::McBlock;
use scenestream::rc;
use scenestream::scenario::{self, ScenarioReport, ScenarioSpec};
use scenestream::server::net::{self, ListenConfig, ServerHandle};
use scenestream::server::{Server, ServerConfig};
use scenestream::voxel::TsdfBlock;
use scenestream::wire::Message;

/// Streaming server listening on TCP and optionally on a WebSocket port (path `/ws`).
#[pyclass(name = "Server")]
struct PyServer {
    server: Arc<Server>,
    handle: Mutex<Option<ServerHandle>>,
    tcp: Option<String>,
    ws: Option<String>,
}

#[pymethods]
impl PyServer {
    #[new]
    #[pyo3(signature = (voxel_size = 0.005, tcp = "127.0.0.1:0", ws = None))]
    fn new(voxel_size: f32, tcp: &str, ws: Option<&str>) -> PyResult<Self> {
        let server = Arc::new(Server::new(ServerConfig::small(voxel_size)));
        let cfg = ListenConfig { tcp: Some(tcp.to_owned()), ws: ws.map(str::to_owned), metrics: None };
        let handle = net::spawn(Arc::clone(&server), &cfg).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        let (tcp, ws) = (handle.tcp_addr().map(|a| a.to_string()), handle.ws_addr().map(|a| a.to_string()));
        Ok(Self { server, handle: Mutex::new(Some(handle)), tcp, ws })
    }

    #[getter]
    fn tcp_addr(&self) -> Option<String> {
        self.tcp.clone()
    }

    #[getter]
    fn ws_addr(&self) -> Option<String> {
        self.ws.clone()
    }

    #[getter]
    fn tsdf_blocks(&self) -> usize {
        self.server.tsdf_map().len()
    }

    #[getter]
    fn mc_blocks(&self) -> usize {
        self.server.mc_map().len()
    }

    #[getter]
    fn running(&self) -> bool {
        self.handle.lock().map(|h| h.is_some()).unwrap_or(false)
    }

    fn shutdown(&self, py: Python<'_>) {
        let handle = self.handle.lock().ok().and_then(|mut h| h.take());
        if let Some(h) = handle {
            py.detach(|| h.shutdown());
        }
    }
}

fn report_dict<'py>(py: Python<'py>, r: &ScenarioReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("name", &r.name)?;
    d.set_item("seconds", r.seconds)?;
    d.set_item("tsdf_blocks", r.tsdf_blocks)?;
    d.set_item("mc_blocks", r.mc_blocks)?;
    d.set_item("rc_blocks", r.rc_blocks)?;
    d.set_item("rc_bytes", r.rc.bytes)?;
    d.set_item("rc_bandwidth", r.rc.mean_bandwidth())?;
    d.set_item("all_exact", r.all_exact())?;
    let mut ecs = Vec::new();
    for e in &r.ecs {
        let x = PyDict::new(py);
        x.set_item("name", &e.link.name)?;
        x.set_item("package", e.link.package)?;
        x.set_item("bytes", e.link.bytes)?;
        x.set_item("blocks", e.link.blocks)?;
        x.set_item("bandwidth", e.link.mean_bandwidth())?;
        x.set_item("exact", e.is_exact())?;
        x.set_item("local_blocks", e.local_blocks)?;
        x.set_item("completeness", e.completeness)?;
        x.set_item("reconnects", e.reconnects)?;
        ecs.push(x);
    }
    d.set_item("ecs", ecs)?;
    d.set_item("summary", r.summary())?;
    d.set_item("csv", &r.csv)?;
    Ok(d)
}

/// Run a scenario given as TOML text and return its report as a dict.
#[pyfunction]
fn run_scenario<'py>(py: Python<'py>, spec: &str) -> PyResult<Bound<'py, PyDict>> {
    let spec = ScenarioSpec::parse(spec).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let report = py.detach(|| scenario::run(&spec)).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    report_dict(py, &report)
}

/// One moving-average step of size `a = dt / tau` over a linearly interpolated signal.
#[pyfunction]
fn ema_step(value: f64, s_n: f64, s_next: f64, a: f64) -> f64 {
    rc::ema_step(value, s_n, s_next, a)
}

/// Raw per-block payload bytes of (MC_BATCH, TSDF_BATCH).
#[pyfunction]
fn block_payload_sizes() -> (usize, usize) {
    raw_sizes()
}

fn raw_sizes() -> (usize, usize) {
    let k = BlockKey::new(0, 0, 0);
    let mc = Message::McBatch(vec![(k, McBlock::default())]).encode_payload().len() - 4;
    let tsdf = Message::TsdfBatch(vec![(k, TsdfBlock::default())]).encode_payload().len() - 4;
    (mc, tsdf)
}

fn stress_dict<'py>(py: Python<'py>, r: &StressReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("threads", r.threads)?;
    d.set_item("ops", r.ops)?;
    d.set_item("mismatches", r.mismatches)?;
    d.set_item("contended", r.contended)?;
    d.set_item("lost_keys", r.lost_keys)?;
    d.set_item("extra_keys", r.extra_keys)?;
    d.set_item("exact", r.is_exact())?;
    d.set_item("seconds", r.elapsed.as_secs_f64())?;
    Ok(d)
}

/// Randomized concurrent workload on the hash set or map, checked against a sequential oracle.
#[pyfunction]
#[pyo3(signature = (structure = "set", threads = 8, ops_per_thread = 20_000, baseline = false, seed = 7))]
fn hash_stress<'py>(
    py: Python<'py>,
    structure: &str,
    threads: usize,
    ops_per_thread: usize,
    baseline: bool,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    if threads == 0 {
        return Err(PyValueError::new_err("threads must be positive"));
    }
    let policy = if baseline { InsertPolicy::FailurePermitting } else { InsertPolicy::Guaranteed };
    let cfg = StressConfig { threads, ops_per_thread, policy, seed, ..StressConfig::default() };
    let report = match structure {
        "set" => py.detach(|| stress::run::<ConcurrentHashSet>(&cfg)),
        "map" => py.detach(|| stress::run::<ConcurrentHashMap<u64>>(&cfg)),
        other => return Err(PyValueError::new_err(format!("unknown structure '{other}' (set|map)"))),
    };
    stress_dict(py, &report)
}

#[pymodule]
fn scenestream_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyServer>()?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(ema_step, m)?)?;
    m.add_function(wrap_pyfunction!(block_payload_sizes, m)?)?;
    m.add_function(wrap_pyfunction!(hash_stress, m)?)?;
    Ok(())
}
