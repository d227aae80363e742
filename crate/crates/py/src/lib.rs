//! Python bindings for `covalign`.
//!
//! Matrices cross the boundary as nested lists of floats and permutations as
//! lists of ints. Library errors raise `CovalignError`, whose message starts
//! with the error kind.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use covalign::harness::{self, Estimator, EstimatorConfig};
use covalign::instances::{self, InstanceKind, InstanceSpec, Normalize};
use covalign::verify::{verify_lemmas, VerifyCounts};
use covalign::{AlignmentInstance, Error, Permutation, SampleSize, SymMatrix};

create_exception!(covalign_py, CovalignError, PyException);

fn err(e: Error) -> PyErr {
    CovalignError::new_err(e.to_string())
}

#[pyclass(name = "SymMatrix", module = "covalign_py", skip_from_py_object)]
#[derive(Clone)]
struct PySymMatrix {
    inner: SymMatrix,
}

#[pymethods]
impl PySymMatrix {
    #[new]
    fn new(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Self { inner: SymMatrix::from_rows(&rows).map_err(err)? })
    }

    #[staticmethod]
    fn identity(d: usize) -> Self {
        Self { inner: SymMatrix::identity(d) }
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn get(&self, i: usize, j: usize) -> PyResult<f64> {
        let d = self.inner.dim();
        if i >= d || j >= d {
            return Err(pyo3::exceptions::PyIndexError::new_err(format!("({i}, {j}) out of range for dimension {d}")));
        }
        Ok(self.inner.get(i, j))
    }

    fn to_list(&self) -> Vec<Vec<f64>> {
        self.inner.to_rows()
    }

    /// `A^π` with entries `A[π(i)][π(j)]`.
    fn permuted(&self, pi: &PyPermutation) -> PyResult<Self> {
        Ok(Self { inner: self.inner.perm_apply(&pi.inner).map_err(err)? })
    }

    fn frobenius_norm(&self) -> f64 {
        self.inner.frobenius_norm()
    }

    fn __len__(&self) -> usize {
        self.inner.dim()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("SymMatrix(dim={})", self.inner.dim())
    }
}

#[pyclass(name = "Permutation", module = "covalign_py", skip_from_py_object)]
#[derive(Clone)]
struct PyPermutation {
    inner: Permutation,
}

#[pymethods]
impl PyPermutation {
    #[new]
    fn new(map: Vec<usize>) -> PyResult<Self> {
        Ok(Self { inner: Permutation::new(map).map_err(err)? })
    }

    #[staticmethod]
    fn identity(d: usize) -> Self {
        Self { inner: Permutation::identity(d) }
    }

    fn to_list(&self) -> Vec<usize> {
        self.inner.as_slice().to_vec()
    }

    fn invert(&self) -> Self {
        Self { inner: self.inner.invert() }
    }

    /// `(self ∘ other)(i) = self(other(i))`.
    fn compose(&self, other: &Self) -> PyResult<Self> {
        Ok(Self { inner: self.inner.compose(&other.inner).map_err(err)? })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __getitem__(&self, i: usize) -> PyResult<usize> {
        self.inner
            .as_slice()
            .get(i)
            .copied()
            .ok_or_else(|| pyo3::exceptions::PyIndexError::new_err(format!("index {i} out of range")))
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Permutation({:?})", self.inner.as_slice())
    }
}

#[pyclass(name = "Instance", module = "covalign_py", frozen)]
struct PyInstance {
    inner: AlignmentInstance,
}

#[pymethods]
impl PyInstance {
    #[getter]
    fn sigma(&self) -> PySymMatrix {
        PySymMatrix { inner: self.inner.sigma.clone() }
    }

    #[getter]
    fn sigma_hat_x(&self) -> PySymMatrix {
        PySymMatrix { inner: self.inner.sigma_hat_x.clone() }
    }

    #[getter]
    fn sigma_hat_y(&self) -> PySymMatrix {
        PySymMatrix { inner: self.inner.sigma_hat_y.clone() }
    }

    #[getter]
    fn pi_star(&self) -> PyPermutation {
        PyPermutation { inner: self.inner.pi_star.clone() }
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __repr__(&self) -> String {
        format!("Instance(dim={}, m={}, n={}, seed={})", self.inner.dim(), self.inner.m, self.inner.n, self.inner.seed)
    }
}

#[pyclass(name = "Estimate", module = "covalign_py", frozen, get_all)]
struct PyEstimate {
    estimator: String,
    permutation: PyPermutation,
    objective: f64,
    iterations: usize,
    converged: bool,
    epsilon: Option<f64>,
    marginal_error: f64,
}

#[pymethods]
impl PyEstimate {
    fn __repr__(&self) -> String {
        format!(
            "Estimate(estimator={:?}, permutation={:?}, objective={}, converged={})",
            self.estimator,
            self.permutation.inner.as_slice(),
            self.objective,
            self.converged
        )
    }
}

fn run(x: &PySymMatrix, y: &PySymMatrix, cfg: EstimatorConfig, seed: u64) -> PyResult<PyEstimate> {
    let e = harness::estimate(&x.inner, &y.inner, &cfg, seed).map_err(err)?;
    Ok(PyEstimate {
        estimator: cfg.name.name().into(),
        permutation: PyPermutation { inner: e.permutation },
        objective: e.objective,
        iterations: e.iterations,
        converged: e.converged,
        epsilon: e.epsilon,
        marginal_error: e.marginal_error,
    })
}

fn sample_size(v: Option<usize>) -> SampleSize {
    v.map_or(SampleSize::Exact, SampleSize::Finite)
}

/// Generates an instance. `m`/`n` of `None` use exact covariances; `m`
/// defaults to `n`.
#[pyfunction]
#[pyo3(signature = (kind, d, seed, n=None, m=None, gamma=1.0, normalize="none", c1=3.0, c5=0.5))]
#[allow(clippy::too_many_arguments)]
fn make_instance(
    kind: &str,
    d: usize,
    seed: u64,
    n: Option<usize>,
    m: Option<usize>,
    gamma: f64,
    normalize: &str,
    c1: f64,
    c5: f64,
) -> PyResult<PyInstance> {
    let kind = match kind {
        "robinson" => InstanceKind::Robinson,
        "wishart" => InstanceKind::Wishart,
        "hard" => InstanceKind::Hard,
        other => return Err(err(Error::InvalidArgument(format!("unknown instance kind {other:?}")))),
    };
    let normalize: Normalize = normalize.parse().map_err(err)?;
    let mut spec = InstanceSpec::new(kind, d, sample_size(m.or(n)), sample_size(n), seed);
    spec.gamma = gamma;
    spec.normalize = normalize;
    spec.c1 = c1;
    spec.c5 = c5;
    Ok(PyInstance { inner: instances::make_instance(&spec).map_err(err)? })
}

/// Entropic Gromov-Wasserstein estimate.
#[pyfunction]
#[pyo3(signature = (sigma_x, sigma_y, epsilon=None, anneal=false))]
fn gw(sigma_x: &PySymMatrix, sigma_y: &PySymMatrix, epsilon: Option<f64>, anneal: bool) -> PyResult<PyEstimate> {
    run(sigma_x, sigma_y, EstimatorConfig { anneal, ..EstimatorConfig::gw(epsilon) }, 0)
}

/// Quasi-MLE by 2-swap local search, or exhaustive enumeration for small d.
#[pyfunction]
#[pyo3(signature = (sigma_x, sigma_y, exhaustive=false, restarts=16, ridge=0.0, seed=0))]
fn qmle(
    sigma_x: &PySymMatrix,
    sigma_y: &PySymMatrix,
    exhaustive: bool,
    restarts: usize,
    ridge: f64,
    seed: u64,
) -> PyResult<PyEstimate> {
    let name = if exhaustive { Estimator::QmleExhaustive } else { Estimator::QmleLocal };
    run(sigma_x, sigma_y, EstimatorConfig { restarts, ridge, ..EstimatorConfig::new(name) }, seed)
}

#[pyfunction]
#[pyo3(signature = (sigma_x, sigma_y, one_sided=false))]
fn spectral(sigma_x: &PySymMatrix, sigma_y: &PySymMatrix, one_sided: bool) -> PyResult<PyEstimate> {
    run(sigma_x, sigma_y, EstimatorConfig { one_sided, ..EstimatorConfig::new(Estimator::Spectral) }, 0)
}

/// Losses of `pi_hat` against `(sigma, pi_star)` as a dict.
#[pyfunction]
fn score<'py>(
    py: Python<'py>,
    sigma: &PySymMatrix,
    pi_star: &PyPermutation,
    pi_hat: &PyPermutation,
) -> PyResult<Bound<'py, PyDict>> {
    let s = harness::score(&sigma.inner, &pi_star.inner, &pi_hat.inner).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("frob_loss_sq", s.frob_loss_sq)?;
    out.set_item("nf_loss_sq", s.nf_loss_sq)?;
    out.set_item("trace_loss", s.trace_loss)?;
    out.set_item("hamming", s.hamming)?;
    Ok(out)
}

/// Runs the property suites with default counts divided by `scale`.
/// Returns a list of per-suite dicts.
#[pyfunction]
#[pyo3(signature = (seed=0, scale=1))]
fn verify<'py>(py: Python<'py>, seed: u64, scale: usize) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let counts = VerifyCounts::default().scaled_down(scale.max(1));
    let report = verify_lemmas(seed, &counts).map_err(err)?;
    report
        .suites
        .iter()
        .map(|s| {
            let d = PyDict::new(py);
            d.set_item("name", s.name)?;
            d.set_item("trials", s.trials)?;
            d.set_item("failures", s.failures)?;
            d.set_item("invalid", s.invalid)?;
            d.set_item("passed", s.passed())?;
            d.set_item("counterexample", s.counterexample.clone())?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn covalign_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CovalignError", m.py().get_type::<CovalignError>())?;
    m.add("__version__", covalign::VERSION)?;
    m.add_class::<PySymMatrix>()?;
    m.add_class::<PyPermutation>()?;
    m.add_class::<PyInstance>()?;
    m.add_class::<PyEstimate>()?;
    m.add_function(wrap_pyfunction!(make_instance, m)?)?;
    m.add_function(wrap_pyfunction!(gw, m)?)?;
    m.add_function(wrap_pyfunction!(qmle, m)?)?;
    m.add_function(wrap_pyfunction!(spectral, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
