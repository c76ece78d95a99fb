//! Python bindings. Point sets cross the boundary as lists of rows.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ept_core::baselines::{self, RbfKernel};
use ept_core::data::{self, AnalyticTarget, DatasetSpec};
use ept_core::divergences::{self, FDivergence};
use ept_core::metrics;
use ept_core::nets::{init_scalar_net, ScalarField, ScalarFieldNet};
use ept_core::ratio_fit;
use ept_core::transport::{self, TransportConfig};
use ept_core::{EptError, Tensor};

fn to_py(e: EptError) -> PyErr {
    match ept_core::cli::exit_code(&e) {
        3 => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(to_py)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.rows().map(<[f64]>::to_vec).collect()
}

fn kernel(bandwidth: Option<f64>, a: &Tensor, b: &Tensor) -> PyResult<RbfKernel> {
    match bandwidth {
        Some(h) => RbfKernel::new(h),
        None => RbfKernel::median(a, b),
    }
    .map_err(to_py)
}

/// Names of the built-in datasets.
#[pyfunction]
fn datasets() -> Vec<&'static str> {
    data::DATASETS.to_vec()
}

/// `n` points from a named dataset.
#[pyfunction]
#[pyo3(signature = (name, n, seed=0))]
fn sample_dataset(name: &str, n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let t = data::sample(&DatasetSpec::new(name, n, seed)).map_err(to_py)?;
    Ok(rows(&t))
}

/// `n` standard Gaussian points in `dim` dimensions.
#[pyfunction]
#[pyo3(signature = (dim, n, seed=0))]
fn reference_sample(dim: usize, n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&data::reference_sample(dim, n, seed).map_err(to_py)?))
}

/// Unbiased MMD^2 with a Gaussian kernel (median heuristic by default).
#[pyfunction]
#[pyo3(signature = (x, y, bandwidth=None))]
fn mmd2(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, bandwidth: Option<f64>) -> PyResult<f64> {
    let (x, y) = (tensor(x)?, tensor(y)?);
    let k = kernel(bandwidth, &x, &y)?;
    metrics::mmd_squared(&x, &y, &k).map_err(to_py)
}

/// Exact W2 between equal-size samples.
#[pyfunction]
fn w2(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::wasserstein2_exact(&tensor(x)?, &tensor(y)?).map_err(to_py)
}

/// Median pairwise distance of the pooled samples.
#[pyfunction]
fn median_bandwidth(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<f64> {
    baselines::median_bandwidth(&tensor(x)?, &tensor(y)?).map_err(to_py)
}

/// An f-divergence generator: `chi2`, `kl`, `js` or `logd`.
#[pyclass(name = "Divergence", frozen)]
struct PyDivergence {
    inner: FDivergence,
}

#[pymethods]
impl PyDivergence {
    #[new]
    fn new(name: &str) -> PyResult<Self> {
        Ok(Self {
            inner: divergences::make_f_divergence(name).map_err(to_py)?,
        })
    }

    #[getter]
    fn name(&self) -> &'static str {
        self.inner.name()
    }

    fn f(&self, u: f64) -> f64 {
        self.inner.f(u)
    }

    fn f_prime(&self, u: f64) -> f64 {
        self.inner.f_prime(u)
    }

    fn f_double_prime(&self, u: f64) -> f64 {
        self.inner.f_double_prime(u)
    }

    fn __repr__(&self) -> String {
        format!("Divergence('{}')", self.inner.name())
    }
}

/// Scalar ReLU network `R: R^dim -> R`.
#[pyclass(name = "RatioNet")]
struct PyRatioNet {
    inner: ScalarFieldNet,
}

#[pymethods]
impl PyRatioNet {
    #[new]
    #[pyo3(signature = (dim, widths=vec![64, 64, 64], seed=0))]
    fn new(dim: usize, widths: Vec<usize>, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: init_scalar_net(dim, &widths, seed).map_err(to_py)?,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Values at each row.
    fn __call__(&self, xs: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        Ok(self.inner.eval_batch(&tensor(xs)?).map_err(to_py)?.into_data())
    }

    /// `(values, input gradients)`.
    fn value_and_grad(&self, xs: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
        let (v, g) = self.inner.value_and_grad(&tensor(xs)?).map_err(to_py)?;
        Ok((v.into_data(), rows(&g)))
    }

    /// Network as JSON.
    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        })
    }
}

/// Gradient-penalised least-squares ratio loss `(total, bregman, penalty)`
/// for target sample `x` and model sample `y`.
#[pyfunction]
#[pyo3(signature = (net, x, y, alpha=0.0))]
fn lsdr_loss(net: &PyRatioNet, x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, alpha: f64) -> PyResult<(f64, f64, f64)> {
    let e = ratio_fit::lsdr_loss(&net.inner, &tensor(x)?, &tensor(y)?, alpha).map_err(to_py)?;
    Ok((e.loss, e.bregman, e.penalty))
}

/// MMD-flow velocity of `particles` towards `target`, evaluated at `query`
/// (default: the particles).
#[pyfunction]
#[pyo3(signature = (target, particles, query=None, bandwidth=None))]
fn mmd_flow_velocity(
    target: Vec<Vec<f64>>,
    particles: Vec<Vec<f64>>,
    query: Option<Vec<Vec<f64>>>,
    bandwidth: Option<f64>,
) -> PyResult<Vec<Vec<f64>>> {
    let (t, p) = (tensor(target)?, tensor(particles)?);
    let q = match query {
        Some(q) => tensor(q)?,
        None => p.clone(),
    };
    let k = kernel(bandwidth, &t, &p)?;
    Ok(rows(&baselines::mmd_flow_velocity(&k, &t, &p, &q).map_err(to_py)?))
}

/// SVGD velocity of `particles` for the analytic density of `dataset`.
#[pyfunction]
#[pyo3(signature = (dataset, particles, bandwidth=None))]
fn svgd_velocity(dataset: &str, particles: Vec<Vec<f64>>, bandwidth: Option<f64>) -> PyResult<Vec<Vec<f64>>> {
    let score = AnalyticTarget::for_dataset(dataset)
        .ok_or_else(|| PyValueError::new_err(format!("`{dataset}` has no analytic density")))?;
    let p = tensor(particles)?;
    let k = kernel(bandwidth, &p, &p)?;
    Ok(rows(&baselines::svgd_velocity(&k, &score, &p).map_err(to_py)?))
}

/// Run a transport config given as a JSON string. Returns a dict with the
/// method, iteration count, final particles and per-iteration fit losses.
#[pyfunction]
fn train<'py>(py: Python<'py>, config: &str) -> PyResult<Bound<'py, PyDict>> {
    let cfg: TransportConfig = serde_json::from_str(config).map_err(|e| PyValueError::new_err(e.to_string()))?;
    cfg.validate().map_err(to_py)?;
    let target = cfg.target().map_err(to_py)?;
    let rec = if cfg.is_latent() {
        transport::run_eptv2(&cfg, &target).map_err(to_py)?.0
    } else {
        transport::run_eptv1(&cfg, &target).map_err(to_py)?
    };
    let out = PyDict::new(py);
    out.set_item("method", &rec.method)?;
    out.set_item("iterations", rec.iterations())?;
    out.set_item("initial", rows(&rec.initial))?;
    out.set_item("particles", rows(rec.final_points()))?;
    let losses: Vec<Option<f64>> = rec.diagnostics.iter().map(|d| d.fit_loss).collect();
    out.set_item("fit_loss", losses)?;
    Ok(out)
}

/// A named preset config as a JSON string.
#[pyfunction]
fn preset(name: &str) -> PyResult<String> {
    let cfg = ept_core::cli::preset(name).map_err(to_py)?;
    serde_json::to_string_pretty(&cfg).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Module initialiser.
#[pymodule]
pub fn ept(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDivergence>()?;
    m.add_class::<PyRatioNet>()?;
    m.add_function(wrap_pyfunction!(datasets, m)?)?;
    m.add_function(wrap_pyfunction!(sample_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(reference_sample, m)?)?;
    m.add_function(wrap_pyfunction!(mmd2, m)?)?;
    m.add_function(wrap_pyfunction!(w2, m)?)?;
    m.add_function(wrap_pyfunction!(median_bandwidth, m)?)?;
    m.add_function(wrap_pyfunction!(lsdr_loss, m)?)?;
    m.add_function(wrap_pyfunction!(mmd_flow_velocity, m)?)?;
    m.add_function(wrap_pyfunction!(svgd_velocity, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(preset, m)?)?;
    Ok(())
}
