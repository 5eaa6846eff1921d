//! Python bindings: bound solvers, network accounting, the gradient suite
//! and single training runs from a configuration file.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use sparsify::config::parse_config_str;
use sparsify::gradcheck::run_suite;
use sparsify::nn::build_wrn;
use sparsify::prune::{self, SparsityTarget};
use sparsify::tensor::Tensor;
use sparsify::train::run_experiment;
use sparsify::Error;

fn to_py(e: Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        4 => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Zeroes entries with `|w| < b`.
#[pyfunction]
fn hard_shrink(w: Vec<f64>, b: f64) -> PyResult<Vec<f64>> {
    prune::hard_shrink(&Tensor::from_vec(w), b).map(Tensor::into_data).map_err(to_py)
}

/// Absolute threshold pruning a fraction `s` of a N(0, σ²) layer.
#[pyfunction]
fn solve_bound_gaussian(sigma: f64, s: f64) -> PyResult<f64> {
    prune::solve_bound_gaussian(sigma, s).map_err(to_py)
}

#[pyfunction]
fn sparsity_of_bound(b: f64, sigma: f64) -> PyResult<f64> {
    prune::sparsity_of_bound(b, sigma).map_err(to_py)
}

/// Threshold from binary search and the sparsity it attains.
#[pyfunction]
#[pyo3(signature = (w, s, epsilon = 1e-3, max_iters = 50))]
fn solve_bound_binary_search(w: Vec<f64>, s: f64, epsilon: f64, max_iters: usize) -> PyResult<(f64, f64)> {
    let target = SparsityTarget::new(s, epsilon, max_iters).map_err(to_py)?;
    let sol = prune::solve_bound_binary_search(&Tensor::from_vec(w), &target).map_err(to_py)?;
    Ok((sol.bound, sol.attained))
}

#[pyfunction]
fn wrn_param_count(depth: usize, k: usize, classes: usize) -> PyResult<usize> {
    Ok(build_wrn(depth, k, classes).map_err(to_py)?.param_count())
}

/// `(name, error, tolerance)` of every finite-difference check.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn gradcheck(seed: u64) -> PyResult<Vec<(String, f64, f64)>> {
    Ok(run_suite(seed).map_err(to_py)?.into_iter().map(|c| (c.name, c.error, c.tol)).collect())
}

/// Trains the run described by a TOML configuration string and returns
/// `(test_accuracy, param_sparsity)`.
#[pyfunction]
fn train(py: Python<'_>, config: &str) -> PyResult<(f64, f64)> {
    let cfg = parse_config_str(config).map_err(to_py)?;
    py.allow_threads(|| {
        let data = cfg.load_dataset()?;
        let spec = cfg.network_spec(&data)?;
        let out = run_experiment(&cfg.train_config(), spec, &data)?;
        Ok((out.test_accuracy, out.report.param_sparsity))
    })
    .map_err(to_py)
}

#[pymodule]
fn sparsify_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(hard_shrink, m)?)?;
    m.add_function(wrap_pyfunction!(solve_bound_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(sparsity_of_bound, m)?)?;
    m.add_function(wrap_pyfunction!(solve_bound_binary_search, m)?)?;
    m.add_function(wrap_pyfunction!(wrn_param_count, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
