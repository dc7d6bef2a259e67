//! Python bindings: models, ensembles, complex derivatives, action,
//! Euler–Lagrange residuals, Noether quantities and batch scenarios.
//!
//! Reports cross the boundary as plain dicts (decoded from the JSON the core
//! crate already serializes); complex numbers map to Python `complex`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::Serialize;
use stochvar::diffusion::{simulate as em_simulate, DensityModel, DiffusionModel, InitialLaw, PathEnsemble, TimeGrid};
use stochvar::lagrangian::{LagrangianSpec, Potential};
use stochvar::nelson::{analytic_complex_derivative, second_derivative, DerivativeField, EstimatorConfig};
use stochvar::noether::{self, OneParameterGroup};
use stochvar::pipeline::{self, RunOptions};
use stochvar::scenario::{self, Registries, Scenario};
use stochvar::variation::{self, ResidualVariant};
use stochvar::Complex64;

create_exception!(stochvar_py, StochvarError, PyException, "Raised for any error reported by the core library.");

fn err(e: stochvar::Error) -> PyErr {
    StochvarError::new_err(e.to_string())
}

fn io_err(e: std::io::Error) -> PyErr {
    StochvarError::new_err(e.to_string())
}

/// Serialize through JSON and decode with the stdlib, giving plain dicts.
fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| StochvarError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Uniform time grid on `[start, end]` with `steps` intervals.
#[pyclass(name = "TimeGrid", module = "stochvar_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTimeGrid(TimeGrid);

#[pymethods]
impl PyTimeGrid {
    #[new]
    fn new(start: f64, end: f64, steps: usize) -> PyResult<Self> {
        TimeGrid::new(start, end, steps).map(PyTimeGrid).map_err(err)
    }

    #[getter]
    fn start(&self) -> f64 {
        self.0.start()
    }

    #[getter]
    fn end(&self) -> f64 {
        self.0.end()
    }

    #[getter]
    fn steps(&self) -> usize {
        self.0.steps()
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.0.dt()
    }

    fn times(&self) -> Vec<f64> {
        self.0.times()
    }

    fn __repr__(&self) -> String {
        format!("TimeGrid({}, {}, {})", self.0.start(), self.0.end(), self.0.steps())
    }
}

/// Diffusion `dX = b dt + σ dW` with its initial law.
#[pyclass(name = "DiffusionModel", module = "stochvar_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyModel(DiffusionModel);

#[pymethods]
impl PyModel {
    /// `σW`, started at `start` (a point) or, with `elapsed > 0`, at the law
    /// of `start + σW_elapsed`.
    #[staticmethod]
    #[pyo3(signature = (start, sigma = 1.0, elapsed = 0.0))]
    fn brownian(start: Vec<f64>, sigma: f64, elapsed: f64) -> PyResult<Self> {
        let dim = start.len();
        let initial = InitialLaw::brownian_at(start, sigma, elapsed);
        DiffusionModel::brownian(dim, sigma, initial).map(PyModel).map_err(err)
    }

    /// `dX = −ωX dt + σ dW`, from its stationary law unless `start` is given.
    #[staticmethod]
    #[pyo3(signature = (dim, omega = 1.0, sigma = 1.0, start = None))]
    fn ornstein_uhlenbeck(dim: usize, omega: f64, sigma: f64, start: Option<Vec<f64>>) -> PyResult<Self> {
        let initial = match start {
            Some(x) => InitialLaw::Point(x),
            None => InitialLaw::ou_stationary(dim, omega, sigma),
        };
        DiffusionModel::ornstein_uhlenbeck(dim, omega, sigma, initial).map(PyModel).map_err(err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn label(&self) -> String {
        self.0.label().to_string()
    }

    fn __repr__(&self) -> String {
        format!("DiffusionModel({})", self.0.label())
    }
}

/// Simulated paths, stored time-major.
#[pyclass(name = "Ensemble", module = "stochvar_py", frozen)]
struct PyEnsemble(PathEnsemble);

#[pymethods]
impl PyEnsemble {
    #[getter]
    fn n_paths(&self) -> usize {
        self.0.n_paths()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed()
    }

    #[getter]
    fn grid(&self) -> PyTimeGrid {
        PyTimeGrid(*self.0.grid())
    }

    /// States of every path at grid index `m`, flattened path-major.
    fn slice(&self, m: usize) -> PyResult<Vec<f64>> {
        if m >= self.0.grid().len() {
            return Err(StochvarError::new_err(format!("grid index {m} out of range")));
        }
        Ok(self.0.slice(m).to_vec())
    }

    /// Sample mean and covariance (row-major) at grid index `m`.
    fn moments(&self, m: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
        if m >= self.0.grid().len() {
            return Err(StochvarError::new_err(format!("grid index {m} out of range")));
        }
        Ok(self.0.moments(m))
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        self.0.write_csv(&mut w).map_err(io_err)?;
        w.flush().map_err(io_err)
    }

    fn write_binary(&self, path: PathBuf) -> PyResult<()> {
        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        self.0.write_binary(&mut w).map_err(io_err)?;
        w.flush().map_err(io_err)
    }

    #[staticmethod]
    fn read_binary(path: PathBuf) -> PyResult<Self> {
        let r = BufReader::new(File::open(path).map_err(io_err)?);
        PathEnsemble::read_binary(r).map(PyEnsemble).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Ensemble(n_paths={}, dim={}, steps={})", self.0.n_paths(), self.0.dim(), self.0.grid().steps())
    }
}

/// Natural Lagrangian `L(x, v) = ½m v·v − U(x)`.
#[pyclass(name = "Lagrangian", module = "stochvar_py", frozen)]
struct PyLagrangian(LagrangianSpec);

#[pymethods]
impl PyLagrangian {
    /// `potential` is one of `free`, `harmonic` (uses `omega`) or
    /// `central_power` (uses `k` and `alpha`).
    #[new]
    #[pyo3(signature = (dim, potential = "free", mass = 1.0, omega = 1.0, k = 1.0, alpha = 2.0))]
    fn new(dim: usize, potential: &str, mass: f64, omega: f64, k: f64, alpha: f64) -> PyResult<Self> {
        let u = match potential {
            "free" => Potential::Free,
            "harmonic" => Potential::harmonic(omega),
            "central_power" => Potential::central_power(k, alpha).map_err(err)?,
            other => return Err(StochvarError::new_err(format!("unknown potential {other:?}"))),
        };
        Ok(PyLagrangian(LagrangianSpec::natural(dim, mass, u)))
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    /// `L(x, v)` for a complex velocity.
    fn __call__(&self, x: Vec<f64>, v: Vec<Complex64>) -> PyResult<Complex64> {
        self.0.eval(&x, &v).map_err(err)
    }
}

/// Per-path derivative values on a set of grid times.
#[pyclass(name = "DerivativeField", module = "stochvar_py", frozen)]
struct PyField(DerivativeField);

#[pymethods]
impl PyField {
    fn times(&self) -> Vec<f64> {
        self.0.times()
    }

    #[getter]
    fn masked_fraction(&self) -> f64 {
        self.0.masked_fraction()
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.0.warnings().to_vec()
    }

    /// Values of path `path` at slot `slot`.
    fn value(&self, slot: usize, path: usize) -> PyResult<Vec<Complex64>> {
        if slot >= self.0.slots().len() || path >= self.0.n_paths() {
            return Err(StochvarError::new_err("slot or path out of range"));
        }
        Ok(self.0.value(slot, path).to_vec())
    }

    /// Ensemble mean of each component at slot `slot`.
    fn mean(&self, slot: usize) -> PyResult<Vec<Complex64>> {
        if slot >= self.0.slots().len() {
            return Err(StochvarError::new_err(format!("slot {slot} out of range")));
        }
        Ok(self.0.slot_means(slot).into_iter().map(|m| m.mean).collect())
    }
}

/// One-parameter affine group `x ↦ A(s)x + c(s)`.
#[pyclass(name = "Group", module = "stochvar_py", frozen)]
struct PyGroup(OneParameterGroup);

#[pymethods]
impl PyGroup {
    #[staticmethod]
    #[pyo3(signature = (dim, i = 0, j = 1))]
    fn rotation(dim: usize, i: usize, j: usize) -> PyResult<Self> {
        OneParameterGroup::rotation(dim, i, j).map(PyGroup).map_err(err)
    }

    #[staticmethod]
    fn translation(direction: Vec<f64>) -> PyResult<Self> {
        OneParameterGroup::translation(direction).map(PyGroup).map_err(err)
    }

    #[staticmethod]
    fn scaling(dim: usize) -> PyResult<Self> {
        OneParameterGroup::scaling(dim).map(PyGroup).map_err(err)
    }

    #[getter]
    fn label(&self) -> String {
        self.0.label()
    }

    fn apply(&self, s: f64, x: Vec<f64>) -> PyResult<Vec<f64>> {
        if x.len() != self.0.dim() {
            return Err(StochvarError::new_err("point dimension does not match the group"));
        }
        Ok(self.0.apply(s, &x))
    }

    fn __repr__(&self) -> String {
        format!("Group({})", self.0.label())
    }
}

fn closed_form_density(model: &DiffusionModel, t0: f64) -> PyResult<DensityModel> {
    if model.is_deterministic() {
        Ok(DensityModel::dirac(model.dim()))
    } else {
        DensityModel::analytic_gaussian(model, t0).map_err(err)
    }
}

/// Euler–Maruyama paths; bitwise reproducible for a given seed.
#[pyfunction]
fn simulate(py: Python<'_>, model: &PyModel, grid: &PyTimeGrid, n_paths: usize, seed: u64) -> PyResult<PyEnsemble> {
    py.detach(|| em_simulate(&model.0, &grid.0, n_paths, seed)).map(PyEnsemble).map_err(err)
}

/// `𝒟X` from the closed-form Gaussian density of `model`, whose initial law
/// holds at time `t0` (the grid start by default).
#[pyfunction]
#[pyo3(signature = (model, ens, t0 = None))]
fn complex_derivative(py: Python<'_>, model: &PyModel, ens: &PyEnsemble, t0: Option<f64>) -> PyResult<PyField> {
    let dm = closed_form_density(&model.0, t0.unwrap_or(ens.0.grid().start()))?;
    py.detach(|| analytic_complex_derivative(&model.0, &dm, &ens.0, &EstimatorConfig::default()))
        .map(PyField)
        .map_err(err)
}

/// `𝒟²X` by the same closed-form route.
#[pyfunction]
#[pyo3(signature = (model, ens, t0 = None))]
fn complex_second_derivative(py: Python<'_>, model: &PyModel, ens: &PyEnsemble, t0: Option<f64>) -> PyResult<PyField> {
    let dm = closed_form_density(&model.0, t0.unwrap_or(ens.0.grid().start()))?;
    py.detach(|| second_derivative(&model.0, &dm, &ens.0, &EstimatorConfig::default()))
        .map(PyField)
        .map_err(err)
}

/// `E[∫ L(X_t, 𝒟X_t) dt]` with its standard errors, as a dict.
#[pyfunction]
fn action<'py>(py: Python<'py>, ens: &PyEnsemble, field: &PyField, lag: &PyLagrangian) -> PyResult<Bound<'py, PyAny>> {
    let est = py.detach(|| variation::action(&ens.0, &field.0, &lag.0)).map_err(err)?;
    to_py(py, &est)
}

/// Euler–Lagrange residual summary: relative size, sup norm and per-time rows.
#[pyfunction]
#[pyo3(signature = (model, ens, lag, t0 = None, conjugate = false))]
fn el_residual<'py>(
    py: Python<'py>,
    model: &PyModel,
    ens: &PyEnsemble,
    lag: &PyLagrangian,
    t0: Option<f64>,
    conjugate: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let dm = closed_form_density(&model.0, t0.unwrap_or(ens.0.grid().start()))?;
    let variant = if conjugate { ResidualVariant::Conjugate } else { ResidualVariant::Complex };
    let res = py
        .detach(|| variation::el_residual(&ens.0, &model.0, &dm, &lag.0, variant, &EstimatorConfig::default()))
        .map_err(err)?;
    #[derive(Serialize)]
    struct Out<'a> {
        relative_size: f64,
        sup_norm: f64,
        max_imag: f64,
        summary: &'a [variation::ResidualSummary],
    }
    to_py(
        py,
        &Out {
            relative_size: res.relative_size(),
            sup_norm: res.sup_norm(),
            max_imag: res.max_imag(),
            summary: res.summary(),
        },
    )
}

/// Noether quantity `I(t)` together with its constancy verdict, as a dict with
/// keys `series` and `constancy`.
#[pyfunction]
fn conserved_quantity<'py>(
    py: Python<'py>,
    lag: &PyLagrangian,
    group: &PyGroup,
    ens: &PyEnsemble,
    field: &PyField,
) -> PyResult<Bound<'py, PyAny>> {
    let (series, constancy) = py
        .detach(|| {
            let series = noether::conserved_quantity(&lag.0, &group.0, &ens.0, &field.0)?;
            let constancy = noether::constancy_test(&series)?;
            Ok::<_, stochvar::Error>((series, constancy))
        })
        .map_err(err)?;
    #[derive(Serialize)]
    struct Out {
        series: noether::ConservedQuantitySeries,
        constancy: noether::ConstancyReport,
    }
    to_py(py, &Out { series, constancy })
}

/// Runs a scenario given as a file path, a bundled name or TOML text, and
/// returns the run report as a dict.
#[pyfunction]
#[pyo3(signature = (scenario, out_dir, seed = None, threads = None))]
fn run_scenario<'py>(
    py: Python<'py>,
    scenario: &str,
    out_dir: PathBuf,
    seed: Option<u64>,
    threads: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let registries = Registries::default();
    let opts = RunOptions { seed, threads, out_dir };
    let report = py
        .detach(|| {
            if scenario.contains('\n') || scenario.contains('=') {
                let sc = Scenario::from_toml_str(scenario, &registries)?;
                pipeline::run(&sc, &opts)
            } else {
                pipeline::run_file(scenario.as_ref(), &registries, &opts)
            }
        })
        .map_err(err)?;
    to_py(py, &report)
}

/// Built-in potentials, groups, density families and bundled scenarios.
#[pyfunction]
fn list_registries() -> String {
    scenario::list_registries()
}

#[pymodule]
fn stochvar_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("StochvarError", m.py().get_type::<StochvarError>())?;
    m.add_class::<PyTimeGrid>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyEnsemble>()?;
    m.add_class::<PyLagrangian>()?;
    m.add_class::<PyField>()?;
    m.add_class::<PyGroup>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(complex_derivative, m)?)?;
    m.add_function(wrap_pyfunction!(complex_second_derivative, m)?)?;
    m.add_function(wrap_pyfunction!(action, m)?)?;
    m.add_function(wrap_pyfunction!(el_residual, m)?)?;
    m.add_function(wrap_pyfunction!(conserved_quantity, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(list_registries, m)?)?;
    Ok(())
}
