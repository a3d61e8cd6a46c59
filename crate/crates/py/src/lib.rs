//! Python bindings: tensors, signatures, fBM sampling, policies and experiments.

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use sigctl::benchmark::{tracking_optimum as core_tracking_optimum, twap as core_twap, TrackingBenchmarkParams};
use sigctl::config::ExperimentConfig;
use sigctl::dynamics::{sampled_expected_cost, LoopMode};
use sigctl::experiment::{rows_to_csv, run, run_linearized};
use sigctl::noise::{FbmSampler as CoreSampler, TimeGrid};
use sigctl::policy::{self as core_policy, Policy as CorePolicy, PolicyKind};
use sigctl::signature::stream_signatures;
use sigctl::tensor::{log_sig_coords, lyndon_basis, parse_word, shuffle, word_string, TruncatedTensor};
use sigctl::Error;

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Config(_) | Error::Shape(_) | Error::Domain(_) | Error::Grid(_) => PyValueError::new_err(msg),
        Error::Io(_) => PyOSError::new_err(msg),
        Error::Numeric(_) | Error::Factorization { .. } | Error::Capacity(_) => PyArithmeticError::new_err(msg),
        Error::Simulation { .. } | Error::Training(_) => PyRuntimeError::new_err(msg),
    }
}

fn word_arg(word: &str) -> PyResult<Vec<usize>> {
    parse_word(word).map_err(py_err)
}

/// Truncated tensor over `R^dim` up to `level`. Words are strings of 1-based letters, e.g. `"12"`.
#[pyclass(name = "Tensor", module = "sigctl")]
#[derive(Clone)]
struct Tensor {
    inner: TruncatedTensor,
}

#[pymethods]
impl Tensor {
    #[new]
    #[pyo3(signature = (dim, level, coeffs=None))]
    fn new(dim: usize, level: usize, coeffs: Option<Vec<f64>>) -> PyResult<Self> {
        let inner = match coeffs {
            Some(c) => TruncatedTensor::from_coeffs(dim, level, c).map_err(py_err)?,
            None => TruncatedTensor::zeros(dim, level),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn one(dim: usize, level: usize) -> Self {
        Self {
            inner: TruncatedTensor::one(dim, level),
        }
    }

    #[staticmethod]
    fn from_csv(dim: usize, text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: TruncatedTensor::from_csv(dim, text).map_err(py_err)?,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn level(&self) -> usize {
        self.inner.level()
    }

    #[getter]
    fn coeffs(&self) -> Vec<f64> {
        self.inner.coeffs().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __getitem__(&self, word: &str) -> PyResult<f64> {
        self.inner.get(&word_arg(word)?).map_err(py_err)
    }

    fn __setitem__(&mut self, word: &str, value: f64) -> PyResult<()> {
        self.inner.set(&word_arg(word)?, value).map_err(py_err)
    }

    fn __mul__(&self, other: &Tensor) -> PyResult<Tensor> {
        Ok(Tensor {
            inner: self.inner.mul(&other.inner).map_err(py_err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!("Tensor(dim={}, level={})", self.inner.dim(), self.inner.level())
    }

    fn words(&self) -> Vec<String> {
        self.inner.iter_words().map(|(w, _)| word_string(&w)).collect()
    }

    fn exp(&self) -> PyResult<Tensor> {
        Ok(Tensor {
            inner: self.inner.exp().map_err(py_err)?,
        })
    }

    fn log(&self) -> PyResult<Tensor> {
        Ok(Tensor {
            inner: self.inner.log().map_err(py_err)?,
        })
    }

    fn inverse(&self) -> PyResult<Tensor> {
        Ok(Tensor {
            inner: self.inner.inverse().map_err(py_err)?,
        })
    }

    /// Shuffle product truncated at `level`.
    fn shuffle(&self, other: &Tensor, level: usize) -> PyResult<Tensor> {
        Ok(Tensor {
            inner: shuffle(&self.inner, &other.inner, level).map_err(py_err)?,
        })
    }

    fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.inner.max_abs_diff(&other.inner)
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }
}

/// Signature of the time-augmented piecewise-linear path through `values` at `times`.
///
/// `values` is a list of points (each a list of length `d`), one per time.
#[pyfunction]
fn signature(times: Vec<f64>, values: Vec<Vec<f64>>, level: usize) -> PyResult<Tensor> {
    if times.len() != values.len() || times.len() < 2 {
        return Err(PyValueError::new_err("need at least two times and one point per time"));
    }
    let d = values[0].len();
    let flat: Vec<f64> = values.iter().flatten().copied().collect();
    if flat.len() != d * times.len() {
        return Err(PyValueError::new_err("points of differing dimension"));
    }
    let ends = [times[0], times[times.len() - 1]];
    let stream = stream_signatures(&times, &flat, d, &ends, level).map_err(py_err)?;
    Ok(Tensor {
        inner: stream.terminal().clone(),
    })
}

/// Log-signature coordinates in the Lyndon basis, with the basis words.
#[pyfunction]
fn log_signature(sig: &Tensor) -> PyResult<(Vec<String>, Vec<f64>)> {
    let basis = lyndon_basis(sig.inner.dim(), sig.inner.level()).map_err(py_err)?;
    let coords = log_sig_coords(&sig.inner, &basis).map_err(py_err)?;
    Ok((basis.words().iter().map(|w| word_string(w)).collect(), coords))
}

/// Exact fractional Brownian motion sampler on a fixed time grid.
#[pyclass(name = "FbmSampler", module = "sigctl")]
struct FbmSampler {
    inner: CoreSampler,
}

#[pymethods]
impl FbmSampler {
    #[new]
    #[pyo3(signature = (hurst, times, seed=0))]
    fn new(hurst: f64, times: Vec<f64>, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: CoreSampler::new(hurst, &times, seed).map_err(py_err)?,
        })
    }

    #[getter]
    fn hurst(&self) -> f64 {
        self.inner.hurst()
    }

    /// `n_paths` paths with stream indices `first_index, first_index + 1, ...`.
    #[pyo3(signature = (n_paths, first_index=0))]
    fn sample(&self, py: Python<'_>, n_paths: usize, first_index: usize) -> PyResult<Vec<Vec<f64>>> {
        let batch = py
            .allow_threads(|| self.inner.sample_paths(n_paths, first_index))
            .map_err(py_err)?;
        Ok(batch.paths().map(|p| p.to_vec()).collect())
    }
}

/// Signature control: linear functional or deep log-signature network.
#[pyclass(name = "Policy", module = "sigctl")]
#[derive(Clone)]
struct Policy {
    inner: CorePolicy,
}

#[pymethods]
impl Policy {
    #[staticmethod]
    #[pyo3(signature = (kind, dim, level, controls=1, seed=0))]
    fn new(kind: &str, dim: usize, level: usize, controls: usize, seed: u64) -> PyResult<Self> {
        let kind: PolicyKind = kind.parse().map_err(py_err)?;
        Ok(Self {
            inner: core_policy::init(kind, dim, level, controls, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: CorePolicy::from_text(text).map_err(py_err)?,
        })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn kind(&self) -> String {
        self.inner.kind().to_string()
    }

    #[getter]
    fn level(&self) -> usize {
        self.inner.level()
    }

    #[getter]
    fn params(&self) -> Vec<f64> {
        self.inner.params().to_vec()
    }

    #[setter]
    fn set_params(&mut self, values: Vec<f64>) -> PyResult<()> {
        self.inner.set_params(&values).map_err(py_err)
    }

    /// Control for a running signature.
    fn __call__(&self, sig: &Tensor) -> PyResult<Vec<f64>> {
        self.inner.eval(&sig.inner).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Policy(kind={}, level={}, params={})", self.inner.kind(), self.inner.level(), self.inner.num_params())
    }
}

fn config_from(text: &str, overrides: Vec<(String, String)>) -> PyResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::parse(text).map_err(py_err)?;
    for (k, v) in overrides {
        cfg.set(&k, &v).map_err(py_err)?;
    }
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

/// Monte Carlo expected cost `(mean, std_error)` of `policy` on test paths.
#[pyfunction]
#[pyo3(signature = (policy, problem="tracking", hurst=0.5, n_paths=1024, dt=0.01, seed=0, closed_loop=false))]
fn expected_cost(
    py: Python<'_>,
    policy: &Policy,
    problem: &str,
    hurst: f64,
    n_paths: usize,
    dt: f64,
    seed: u64,
    closed_loop: bool,
) -> PyResult<(f64, f64)> {
    let cfg = config_from(
        "",
        vec![
            ("problem".into(), problem.into()),
            ("dt".into(), dt.to_string()),
            ("loop".into(), if closed_loop { "closed" } else { "open" }.into()),
        ],
    )?;
    let spec = cfg.problem_spec().map_err(py_err)?;
    let mode = if closed_loop { LoopMode::Closed } else { LoopMode::Open };
    let est = py
        .allow_threads(|| -> sigctl::Result<_> {
            let grid = TimeGrid::uniform(cfg.horizon, cfg.n_steps(), cfg.refine)?;
            let sampler = CoreSampler::new(hurst, grid.fine(), seed)?;
            sampled_expected_cost(&spec, &grid, &sampler, n_paths, 0, &policy.inner, mode)
        })
        .map_err(py_err)?;
    Ok((est.mean, est.std_error))
}

/// Optimal tracking cost and the quadrature order it converged at.
#[pyfunction]
#[pyo3(signature = (hurst, kappa=0.1))]
fn tracking_optimum(hurst: f64, kappa: f64) -> PyResult<(f64, usize)> {
    let mut p = TrackingBenchmarkParams::new(hurst);
    p.kappa = kappa;
    let est = core_tracking_optimum(&p).map_err(py_err)?;
    Ok((est.value, est.order))
}

/// TWAP rate and expected proceeds.
#[pyfunction]
#[pyo3(signature = (q0=1.0, x0=1.0, kappa=0.001, kappa_terminal=0.1, horizon=1.0))]
fn twap(q0: f64, x0: f64, kappa: f64, kappa_terminal: f64, horizon: f64) -> PyResult<(f64, f64)> {
    core_twap(q0, x0, kappa, kappa_terminal, horizon).map_err(py_err)
}

/// Train every `(H, N)` cell of a configuration; returns the result CSV and the trained policies.
#[pyfunction]
#[pyo3(signature = (config="", **overrides))]
fn train(py: Python<'_>, config: &str, overrides: Option<std::collections::HashMap<String, PyObject>>) -> PyResult<(String, Vec<Policy>)> {
    let cfg = config_from(config, kwargs(py, overrides)?)?;
    let (rows, cells) = py.allow_threads(|| run(&cfg)).map_err(py_err)?;
    Ok((rows_to_csv(&rows), cells.into_iter().map(|c| Policy { inner: c.policy }).collect()))
}

/// Solve the linearized execution problem; returns the result CSV.
#[pyfunction]
#[pyo3(signature = (config="problem = execution", **overrides))]
fn linearize(py: Python<'_>, config: &str, overrides: Option<std::collections::HashMap<String, PyObject>>) -> PyResult<String> {
    let cfg = config_from(config, kwargs(py, overrides)?)?;
    let rows = py.allow_threads(|| run_linearized(&cfg)).map_err(py_err)?;
    Ok(rows_to_csv(&rows))
}

fn kwargs(py: Python<'_>, overrides: Option<std::collections::HashMap<String, PyObject>>) -> PyResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (k, v) in overrides.unwrap_or_default() {
        let v = v.bind(py);
        let text = match v.extract::<Vec<PyObject>>() {
            Ok(items) if !v.is_instance_of::<pyo3::types::PyString>() => items
                .iter()
                .map(|i| i.bind(py).str().map(|s| s.to_string()))
                .collect::<PyResult<Vec<_>>>()?
                .join(","),
            _ => v.str()?.to_string(),
        };
        out.push((k, text));
    }
    out.sort();
    Ok(out)
}

#[pymodule]
#[pyo3(name = "sigctl")]
pub fn sigctl_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Tensor>()?;
    m.add_class::<FbmSampler>()?;
    m.add_class::<Policy>()?;
    m.add_function(wrap_pyfunction!(signature, m)?)?;
    m.add_function(wrap_pyfunction!(log_signature, m)?)?;
    m.add_function(wrap_pyfunction!(expected_cost, m)?)?;
    m.add_function(wrap_pyfunction!(tracking_optimum, m)?)?;
    m.add_function(wrap_pyfunction!(twap, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(linearize, m)?)?;
    Ok(())
}
