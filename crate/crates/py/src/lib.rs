use nalgebra::DMatrix;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde::Serialize;
use serde_json::Value;

use riskfilter::barrier::{self as hb, Barrier, CircularStayOut, Halfspace, LookaheadUnicycle, StateBarrier};
use riskfilter::models::{Integrator1D, ObservationModel, Omni, Process, ProcessModel, RangeBeacon, Unicycle};
use riskfilter::particle_filter::{BeliefState, PfConfig};
use riskfilter::risk::{self, SupportBound};
use riskfilter::rng::StreamKey;
use riskfilter::safety_filter::{self as sf, FilterParams, InputBox, QpProblem};
use riskfilter::sim::{self, Scenario};
use riskfilter::Error;

create_exception!(riskfilter_py, RiskFilterError, PyException);

fn err(e: Error) -> PyErr {
    match e {
        Error::Dimension { .. }
        | Error::InvalidParameter { .. }
        | Error::Empty
        | Error::SupportViolation { .. }
        | Error::NonUniformWeights
        | Error::Config { .. } => PyValueError::new_err(e.to_string()),
        _ => RiskFilterError::new_err(e.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, json_to_py(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| RiskFilterError::new_err(e.to_string()))?;
    json_to_py(py, &v)
}

#[pyclass(name = "Process", module = "riskfilter_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyProcess {
    inner: Process,
}

#[pymethods]
impl PyProcess {
    #[staticmethod]
    #[pyo3(signature = (sigma = 0.1))]
    fn integrator1d(sigma: f64) -> Self {
        Self {
            inner: Process::Integrator1D(Integrator1D { sigma }),
        }
    }

    #[staticmethod]
    #[pyo3(signature = (sigma = None))]
    fn unicycle(sigma: Option<[f64; 3]>) -> Self {
        Self {
            inner: Process::Unicycle(sigma.map(|sigma| Unicycle { sigma }).unwrap_or_default()),
        }
    }

    #[staticmethod]
    #[pyo3(signature = (sigma = None))]
    fn omni(sigma: Option<[f64; 3]>) -> Self {
        Self {
            inner: Process::Omni(sigma.map(|sigma| Omni { sigma }).unwrap_or_default()),
        }
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    /// `(f(x), g(x), diag σ(x))` as nested lists.
    fn fields(&self, x: Vec<f64>) -> PyResult<(Vec<f64>, Vec<Vec<f64>>, Vec<f64>)> {
        let f = self.inner.fields(&x).map_err(err)?;
        let g = f.input_matrix.row_iter().map(|r| r.iter().copied().collect()).collect();
        Ok((f.drift.iter().copied().collect(), g, f.diffusion.diagonal().iter().copied().collect()))
    }

    fn __repr__(&self) -> String {
        format!("Process.{}()", self.inner.name())
    }
}

#[pyclass(name = "Barrier", module = "riskfilter_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyBarrier {
    inner: Barrier,
}

#[pymethods]
impl PyBarrier {
    /// `h(x) = c − a·x`.
    #[staticmethod]
    fn halfspace(a: Vec<f64>, c: f64) -> Self {
        Self {
            inner: Barrier::Halfspace(Halfspace { a, c }),
        }
    }

    #[staticmethod]
    fn circular(center: [f64; 2], radius: f64) -> Self {
        Self {
            inner: Barrier::Circular(CircularStayOut { center, radius }),
        }
    }

    #[staticmethod]
    fn lookahead(center: [f64; 2], radius: f64, offset: f64) -> Self {
        Self {
            inner: Barrier::Lookahead(LookaheadUnicycle { center, radius, offset }),
        }
    }

    fn value(&self, x: Vec<f64>) -> f64 {
        self.inner.value(&x)
    }

    fn gradient(&self, x: Vec<f64>) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.inner.gradient(&x, &mut out);
        out
    }

    fn hessian(&self, x: Vec<f64>) -> Vec<Vec<f64>> {
        let n = x.len();
        let mut out = vec![0.0; n * n];
        self.inner.hessian(&x, &mut out);
        out.chunks(n).map(<[f64]>::to_vec).collect()
    }

    fn __repr__(&self) -> String {
        format!("Barrier.{}(...)", self.inner.name())
    }
}

#[pyclass(name = "RangeBeacon", module = "riskfilter_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyRangeBeacon {
    inner: RangeBeacon,
}

#[pymethods]
impl PyRangeBeacon {
    #[new]
    #[pyo3(signature = (beacon = [4.0, 4.0], noise_std = 0.3, rate_hz = 1.0))]
    fn new(beacon: [f64; 2], noise_std: f64, rate_hz: f64) -> Self {
        Self {
            inner: RangeBeacon {
                beacon,
                noise_std,
                rate_hz,
            },
        }
    }

    fn likelihood(&self, z: Vec<f64>, x: Vec<f64>) -> PyResult<f64> {
        riskfilter::models::observe_likelihood(&self.inner, &z, &x).map_err(err)
    }

    fn predict(&self, x: Vec<f64>) -> Vec<f64> {
        self.inner.predict(&x)
    }
}

#[pyclass(name = "RiskConfig", module = "riskfilter_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyRiskConfig {
    inner: risk::RiskConfig,
}

#[pymethods]
impl PyRiskConfig {
    /// Without `b_min` the lowest sample serves as the support bound.
    #[new]
    #[pyo3(signature = (alpha, delta, b_min = None))]
    fn new(alpha: f64, delta: f64, b_min: Option<f64>) -> PyResult<Self> {
        let support = b_min.map_or(SupportBound::SampleMin, SupportBound::Fixed);
        let inner = risk::RiskConfig::new(alpha, delta, b_min.unwrap_or(0.0))
            .and_then(|c| c.with_support(support))
            .map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }

    #[getter]
    fn delta(&self) -> f64 {
        self.inner.delta
    }

    fn kappa(&self, n: usize) -> f64 {
        self.inner.kappa(n)
    }
}

/// Weighted particle belief with its own random stream.
#[pyclass(name = "Belief", module = "riskfilter_py")]
struct PyBelief {
    inner: BeliefState,
    key: StreamKey,
    pf: PfConfig,
}

#[pymethods]
impl PyBelief {
    #[new]
    #[pyo3(signature = (particles, seed = 0, dt_sde = 0.01))]
    fn new(particles: Vec<Vec<f64>>, seed: u64, dt_sde: f64) -> PyResult<Self> {
        let inner = BeliefState::from_particles(&particles).map_err(err)?;
        let pf = PfConfig {
            dt_sde,
            ..PfConfig::new(inner.len())
        };
        pf.validate().map_err(err)?;
        Ok(Self {
            inner,
            key: StreamKey::new(seed),
            pf,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn time(&self) -> f64 {
        self.inner.time()
    }

    #[getter]
    fn particles(&self) -> Vec<Vec<f64>> {
        self.inner.particles().map(<[f64]>::to_vec).collect()
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights().to_vec()
    }

    fn mean_state(&self) -> Vec<f64> {
        self.inner.mean_state()
    }

    fn effective_sample_size(&self) -> f64 {
        self.inner.effective_sample_size()
    }

    fn covariance(&self, coords: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        if let Some(&c) = coords.iter().find(|&&c| c >= self.inner.dim()) {
            return Err(PyValueError::new_err(format!("coordinate {c} out of range")));
        }
        let cov = self.inner.covariance(&coords);
        Ok(cov.row_iter().map(|r| r.iter().copied().collect()).collect())
    }

    fn propagate(&mut self, u: Vec<f64>, dt: f64, process: &PyProcess) -> PyResult<()> {
        self.inner
            .propagate(&u, dt, &process.inner, &self.pf, &mut self.key)
            .map_err(err)
    }

    fn update(&mut self, z: Vec<f64>, sensor: &PyRangeBeacon) -> PyResult<()> {
        let mut rng = self.key.fork(5).substream(self.key.epoch());
        self.key.advance();
        self.inner.measurement_update(&z, &sensor.inner, &mut rng).map_err(err)
    }

    fn barrier_values(&self, barrier: &PyBarrier) -> Vec<f64> {
        hb::barrier_values(&self.inner, &barrier.inner)
    }
}

#[pyfunction]
fn empirical_var(samples: Vec<f64>, alpha: f64) -> PyResult<f64> {
    risk::empirical_var(&samples, alpha).map_err(err)
}

#[pyfunction]
fn empirical_cvar(samples: Vec<f64>, alpha: f64) -> PyResult<f64> {
    risk::empirical_cvar(&samples, alpha).map_err(err)
}

#[pyfunction]
fn cvar_lower_bound(samples: Vec<f64>, cfg: &PyRiskConfig) -> PyResult<f64> {
    risk::cvar_lower_bound(&samples, &cfg.inner).map_err(err)
}

/// Per-sample weights and the weight on the support bound.
#[pyfunction]
fn cvar_lower_bound_coefficients(samples: Vec<f64>, cfg: &PyRiskConfig) -> PyResult<(Vec<f64>, f64)> {
    let c = risk::cvar_lower_bound_coefficients(&samples, &cfg.inner).map_err(err)?;
    Ok((c.gamma, c.gamma_b))
}

#[pyfunction]
fn gaussian_cvar(mu: f64, sigma: f64, alpha: f64) -> PyResult<f64> {
    risk::gaussian_cvar(mu, sigma, alpha).map_err(err)
}

/// Oracle CVaR of `2 − x` after inputs `[(dt, u), ...]`.
#[pyfunction]
fn kf_oracle_cvar(mu0: f64, sigma0: f64, sigma_w: f64, history: Vec<(f64, f64)>, alpha: f64) -> PyResult<f64> {
    sim::kf_oracle_cvar(mu0, sigma0, sigma_w, &history, alpha).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (trials, n, alpha, delta, b_min = -5.0, seed = 0))]
fn bound_coverage(py: Python<'_>, trials: usize, n: usize, alpha: f64, delta: f64, b_min: f64, seed: u64) -> PyResult<Bound<'_, PyAny>> {
    let r = py.detach(|| risk::bound_coverage(trials, n, alpha, delta, b_min, seed)).map_err(err)?;
    to_py(py, &r)
}

/// `h_b`, the per-particle gradient rows and the diffusion trace term.
#[pyfunction]
fn belief_barrier<'py>(
    py: Python<'py>,
    belief: &PyBelief,
    barrier: &PyBarrier,
    cfg: &PyRiskConfig,
    process: &PyProcess,
) -> PyResult<Bound<'py, PyDict>> {
    let t = hb::belief_barrier(&belief.inner, &barrier.inner, &cfg.inner, &process.inner).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("h_b", t.h_b)?;
    d.set_item("values", t.values.clone())?;
    d.set_item("grad", t.grad.chunks(t.dim).map(<[f64]>::to_vec).collect::<Vec<_>>())?;
    d.set_item("trace_term", t.trace_term)?;
    d.set_item("gamma", t.gamma().to_vec())?;
    d.set_item("gamma_b", t.coefficients.gamma_b)?;
    Ok(d)
}

fn params(m: usize, gamma_cbf: f64, q_diag: Option<Vec<f64>>, limits: Option<Vec<f64>>) -> PyResult<FilterParams> {
    let mut p = FilterParams::identity(m).with_gamma(gamma_cbf);
    if let Some(q) = q_diag {
        if q.len() != m {
            return Err(PyValueError::new_err(format!("q_diag needs {m} entries")));
        }
        p.q = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(q));
    }
    if let Some(l) = limits {
        p = p.with_bounds(InputBox::symmetric(&l).map_err(err)?);
    }
    Ok(p)
}

/// Risk-aware filter; `variant` picks the baselines (`mu_scbf`, `be_scbf`).
#[pyfunction]
#[pyo3(signature = (belief, barrier, cfg, process, u_ref, gamma_cbf = 1.0, q_diag = None, limits = None, variant = "ours", eta = 0.05))]
#[allow(clippy::too_many_arguments)]
fn safety_filter<'py>(
    py: Python<'py>,
    belief: &PyBelief,
    barrier: &PyBarrier,
    cfg: &PyRiskConfig,
    process: &PyProcess,
    u_ref: Vec<f64>,
    gamma_cbf: f64,
    q_diag: Option<Vec<f64>>,
    limits: Option<Vec<f64>>,
    variant: &str,
    eta: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let p = params(process.inner.input_dim(), gamma_cbf, q_diag, limits)?;
    let (b, bar, model) = (&belief.inner, &barrier.inner, &process.inner);
    let res = match variant {
        "ours" => sf::filter(b, bar, &cfg.inner, model, &u_ref, &p),
        "mu_scbf" => sf::baseline_mu_scbf(b, bar, model, &u_ref, &p),
        "be_scbf" => sf::baseline_be_scbf(b, bar, model, &u_ref, &p, eta),
        other => return Err(PyValueError::new_err(format!("unknown variant `{other}`"))),
    }
    .map_err(err)?;
    to_py(py, &res)
}

/// `min (u − u_ref)ᵀQ(u − u_ref)` subject to `a·u ≥ c` and an optional box.
#[pyfunction]
#[pyo3(signature = (q, u_ref, a, c, lower = None, upper = None))]
fn solve_qp<'py>(
    py: Python<'py>,
    q: Vec<Vec<f64>>,
    u_ref: Vec<f64>,
    a: Vec<f64>,
    c: f64,
    lower: Option<Vec<f64>>,
    upper: Option<Vec<f64>>,
) -> PyResult<Bound<'py, PyAny>> {
    let m = q.len();
    if q.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("q must be square"));
    }
    let bounds = match (lower, upper) {
        (Some(l), Some(u)) => Some(InputBox::new(l, u).map_err(err)?),
        (None, None) => None,
        _ => return Err(PyValueError::new_err("give both lower and upper or neither")),
    };
    let p = QpProblem {
        q: DMatrix::from_fn(m, m, |i, j| q[i][j]),
        u_ref,
        a,
        c,
        bounds,
    };
    let res = sf::solve_qp(&p).map_err(err)?;
    to_py(py, &res)
}

/// Parses and validates a scenario document; returns it as a dict.
#[pyfunction]
fn load_scenario<'py>(py: Python<'py>, toml_text: &str) -> PyResult<Bound<'py, PyAny>> {
    let s = Scenario::from_toml_str(toml_text).map_err(err)?;
    to_py(py, &s)
}

/// Runs one repetition. Returns `{"summary": ..., "records": [...]}`.
#[pyfunction]
#[pyo3(signature = (toml_text, seed = None))]
fn run_scenario<'py>(py: Python<'py>, toml_text: &str, seed: Option<u64>) -> PyResult<Bound<'py, PyDict>> {
    let s = Scenario::from_toml_str(toml_text).map_err(err)?;
    let seed = seed.unwrap_or(s.seed);
    let run = py.detach(|| sim::run_scenario(&s, seed)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("summary", to_py(py, &run.summary)?)?;
    d.set_item("records", to_py(py, &run.records)?)?;
    Ok(d)
}

#[pymodule]
fn riskfilter_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("RiskFilterError", m.py().get_type::<RiskFilterError>())?;
    m.add("EXAMPLE1_TOML", sim::EXAMPLE1_TOML)?;
    m.add("MULTIMODAL_TOML", sim::MULTIMODAL_TOML)?;
    m.add("DROPOUT_TOML", sim::DROPOUT_TOML)?;
    m.add_class::<PyProcess>()?;
    m.add_class::<PyBarrier>()?;
    m.add_class::<PyRangeBeacon>()?;
    m.add_class::<PyRiskConfig>()?;
    m.add_class::<PyBelief>()?;
    m.add_function(wrap_pyfunction!(empirical_var, m)?)?;
    m.add_function(wrap_pyfunction!(empirical_cvar, m)?)?;
    m.add_function(wrap_pyfunction!(cvar_lower_bound, m)?)?;
    m.add_function(wrap_pyfunction!(cvar_lower_bound_coefficients, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_cvar, m)?)?;
    m.add_function(wrap_pyfunction!(kf_oracle_cvar, m)?)?;
    m.add_function(wrap_pyfunction!(bound_coverage, m)?)?;
    m.add_function(wrap_pyfunction!(belief_barrier, m)?)?;
    m.add_function(wrap_pyfunction!(safety_filter, m)?)?;
    m.add_function(wrap_pyfunction!(solve_qp, m)?)?;
    m.add_function(wrap_pyfunction!(load_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    Ok(())
}
