//! Python bindings. Matrices cross the boundary as lists of rows.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dpgp::baselines::{bin_data, dp_bin_means, predict_binned, BinGrid, IntegralGp};
use dpgp::cloaking::{release_cloaking_with, CloakingOptions};
use dpgp::hyperparam::{select_hyperparameters, HyperGrid, UtilityOptions};
use dpgp::rkhs::{CDeltaMode};
use dpgp::{DpParams, ReleaseResult};

fn err(e: dpgp::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err("ragged matrix: rows differ in length"));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[pyclass(name = "KernelSpec", from_py_object)]
#[derive(Clone)]
struct PyKernelSpec {
    inner: dpgp::KernelSpec,
}

#[pymethods]
impl PyKernelSpec {
    #[new]
    #[pyo3(signature = (variance, lengthscales, noise_variance=0.0))]
    fn new(variance: f64, lengthscales: Vec<f64>, noise_variance: f64) -> PyResult<Self> {
        Ok(Self {
            inner: dpgp::KernelSpec::new(variance, lengthscales, noise_variance).map_err(err)?,
        })
    }

    #[getter]
    fn variance(&self) -> f64 {
        self.inner.variance
    }

    #[getter]
    fn lengthscales(&self) -> Vec<f64> {
        self.inner.lengthscales.clone()
    }

    #[getter]
    fn noise_variance(&self) -> f64 {
        self.inner.noise_variance
    }

    fn eval(&self, x1: Vec<f64>, x2: Vec<f64>) -> PyResult<f64> {
        self.inner.eval(&x1, &x2).map_err(err)
    }

    fn gram(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.gram(&matrix(&x)?).map_err(err)?))
    }

    fn __repr__(&self) -> String {
        format!(
            "KernelSpec(variance={}, lengthscales={:?}, noise_variance={})",
            self.inner.variance, self.inner.lengthscales, self.inner.noise_variance
        )
    }
}

#[pyclass(name = "GpModel")]
struct PyGpModel {
    inner: dpgp::GpModel,
}

#[pymethods]
impl PyGpModel {
    #[new]
    fn new(x: Vec<Vec<f64>>, y: Vec<f64>, spec: PyKernelSpec) -> PyResult<Self> {
        let inner = dpgp::GpModel::fit(matrix(&x)?, DVector::from_vec(y), spec.inner).map_err(err)?;
        Ok(Self { inner })
    }

    fn predict_mean(&self, xstar: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        Ok(self.inner.predict_mean(&matrix(&xstar)?).map_err(err)?.iter().copied().collect())
    }

    fn predict_var(&self, xstar: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        Ok(self.inner.predict_var(&matrix(&xstar)?).map_err(err)?.iter().copied().collect())
    }

    fn cloaking_matrix(&self, xstar: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.cloaking_matrix(&matrix(&xstar)?).map_err(err)?))
    }

    /// `b(K^-1)` for the training inputs.
    fn bound_b(&self) -> f64 {
        dpgp::rkhs::bound_b(&self.inner.k_inverse(), true)
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }
}

fn release_dict<'py>(py: Python<'py>, r: &ReleaseResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("predictions", r.predictions.clone())?;
    d.set_item("posterior_var", r.posterior_var.clone())?;
    d.set_item("noise_std", r.noise_std.clone())?;
    let p = &r.privacy;
    let privacy = PyDict::new(py);
    privacy.set_item("mechanism", p.mechanism.clone())?;
    privacy.set_item("epsilon", p.epsilon)?;
    privacy.set_item("delta", p.delta)?;
    privacy.set_item("d", p.d)?;
    privacy.set_item("c_delta", p.c_delta)?;
    privacy.set_item("sensitivity", p.sensitivity)?;
    privacy.set_item("scale", p.scale)?;
    privacy.set_item("bound_b", p.bound_b)?;
    privacy.set_item("delta_achieved", p.delta_achieved)?;
    privacy.set_item("not_private", p.not_private)?;
    privacy.set_item("notes", p.notes.clone())?;
    d.set_item("privacy", privacy)?;
    Ok(d)
}

/// RKHS release at `xstar`. Outputs must already lie in a width-`d` range.
#[pyfunction]
#[pyo3(signature = (model, xstar, epsilon, delta, d, seed=0))]
fn release_rkhs<'py>(
    py: Python<'py>,
    model: &PyGpModel,
    xstar: Vec<Vec<f64>>,
    epsilon: f64,
    delta: f64,
    d: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let dp = DpParams::new(epsilon, delta, d).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = dpgp::rkhs::release_rkhs(&model.inner, &matrix(&xstar)?, &dp, &mut rng).map_err(err)?;
    release_dict(py, &r)
}

/// Cloaking release at `xstar`.
#[pyfunction]
#[pyo3(signature = (model, xstar, epsilon, delta, d, seed=0))]
fn release_cloaking<'py>(
    py: Python<'py>,
    model: &PyGpModel,
    xstar: Vec<Vec<f64>>,
    epsilon: f64,
    delta: f64,
    d: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let dp = DpParams::new(epsilon, delta, d).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = CloakingOptions {
        seed,
        ..CloakingOptions::default()
    };
    let r = release_cloaking_with(&model.inner, &matrix(&xstar)?, &dp, &opts, &mut rng, 1.0).map_err(err)?;
    release_dict(py, &r)
}

/// Optimise the noise covariance for a cloaking matrix.
#[pyfunction]
#[pyo3(signature = (c, seed=0))]
fn solve_cloaking<'py>(py: Python<'py>, c: Vec<Vec<f64>>, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let opts = CloakingOptions {
        seed,
        ..CloakingOptions::default()
    };
    let sol = dpgp::cloaking::solve(&matrix(&c)?, &opts).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("lambdas", sol.lambdas.iter().copied().collect::<Vec<_>>())?;
    d.set_item("m", rows(&sol.m))?;
    d.set_item("delta_achieved", sol.delta_achieved)?;
    d.set_item("iterations", sol.iterations)?;
    d.set_item("attempts", sol.attempts)?;
    Ok(d)
}

/// Gaussian-mechanism constant; `mode` is `"rkhs"` or `"cloaking"`.
#[pyfunction]
fn c_delta(delta: f64, mode: &str) -> PyResult<f64> {
    let mode = match mode {
        "rkhs" => CDeltaMode::Rkhs,
        "cloaking" => CDeltaMode::Cloaking,
        other => return Err(PyValueError::new_err(format!("unknown mode `{other}`"))),
    };
    dpgp::rkhs::c_delta(delta, mode).map_err(err)
}

#[pyfunction]
fn varah_bound(j: Vec<Vec<f64>>) -> PyResult<f64> {
    dpgp::rkhs::varah_bound(&matrix(&j)?).map_err(err)
}

/// DP choice of an isotropic kernel from a lengthscale / noise grid.
#[pyfunction]
#[pyo3(signature = (x, y, d, lengthscales, noise_variances, variance=1.0, folds=10, select_epsilon=1.0, seed=0))]
#[allow(clippy::too_many_arguments)]
fn select_kernel<'py>(
    py: Python<'py>,
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    d: f64,
    lengthscales: Vec<f64>,
    noise_variances: Vec<f64>,
    variance: f64,
    folds: usize,
    select_epsilon: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let x = matrix(&x)?;
    let grid = HyperGrid::product(variance, &lengthscales, &noise_variances, x.ncols(), folds, select_epsilon)
        .map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sel = select_hyperparameters(&x, &DVector::from_vec(y), d, &grid, UtilityOptions::default(), &mut rng)
        .map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("index", sel.index)?;
    out.set_item("spec", PyKernelSpec { inner: sel.spec })?;
    out.set_item("utilities", sel.scores.iter().map(|s| s.utility).collect::<Vec<_>>())?;
    out.set_item("sensitivity", sel.sensitivity)?;
    out.set_item("probabilities", sel.probabilities)?;
    Ok(out)
}

/// Laplace-noised bin means, read back at `xstar` directly (`integral=False`)
/// or through a GP on the bin averages (`integral=True`, needs `spec`).
#[pyfunction]
#[pyo3(signature = (x, y, xstar, bounds, bins_per_dim, epsilon, d, integral=false, spec=None, seed=0))]
#[allow(clippy::too_many_arguments)]
fn release_binned(
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    xstar: Vec<Vec<f64>>,
    bounds: Vec<(f64, f64)>,
    bins_per_dim: usize,
    epsilon: f64,
    d: f64,
    integral: bool,
    spec: Option<PyKernelSpec>,
    seed: u64,
) -> PyResult<Vec<f64>> {
    let dp = DpParams::new(epsilon, 0.5, d).map_err(err)?;
    let edges = BinGrid::uniform_edges(&bounds, bins_per_dim).map_err(err)?;
    let grid = bin_data(&matrix(&x)?, &DVector::from_vec(y), edges).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bins = dp_bin_means(&grid, &dp, &mut rng).map_err(err)?;
    let xstar = matrix(&xstar)?;
    if integral {
        let spec = spec.ok_or_else(|| PyValueError::new_err("integral binning needs a kernel spec"))?;
        let igp = IntegralGp::fit(&grid, &bins, &spec.inner).map_err(err)?;
        Ok(igp.predict(&xstar).map_err(err)?.iter().copied().collect())
    } else {
        Ok(predict_binned(&grid, &bins.values, &xstar).map_err(err)?.0)
    }
}

#[pymodule]
fn pydpgp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyKernelSpec>()?;
    m.add_class::<PyGpModel>()?;
    m.add_function(wrap_pyfunction!(release_rkhs, m)?)?;
    m.add_function(wrap_pyfunction!(release_cloaking, m)?)?;
    m.add_function(wrap_pyfunction!(solve_cloaking, m)?)?;
    m.add_function(wrap_pyfunction!(c_delta, m)?)?;
    m.add_function(wrap_pyfunction!(varah_bound, m)?)?;
    m.add_function(wrap_pyfunction!(select_kernel, m)?)?;
    m.add_function(wrap_pyfunction!(release_binned, m)?)?;
    Ok(())
}
