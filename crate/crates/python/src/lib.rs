//! Python bindings for `hte-core`.
//!
//! Matrices cross the boundary as lists of rows and structured results as
//! plain dicts, so the module has no runtime dependency beyond CPython.

use std::path::PathBuf;

use hte_core::dgm::{self, DgmConfig};
use hte_core::eval::{self, BootstrapMode};
use hte_core::harness::{run_study, RunOptions, StudyPlan};
use hte_core::strategies::{fit_strategy, DeltaPredictor, StrategySpec, STRATEGY_IDS};
use hte_core::tabular::{self, Schema};
use nalgebra::DMatrix;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(hte, HteError, PyException, "Raised when fitting, simulation or validation fails.");

fn err(e: hte_core::error::Error) -> PyErr {
    HteError::new_err(e.to_string())
}

fn to_python<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| HteError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let p = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != p) {
        return Err(PyValueError::new_err("covariate rows have different lengths"));
    }
    Ok(DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Binary-outcome trial data: covariates, treatment arm and outcome per subject.
#[pyclass(module = "hte", name = "Dataset", frozen, skip_from_py_object)]
struct PyDataset {
    inner: tabular::Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (covariates, treatment, outcome, column_names=None))]
    fn new(covariates: Vec<Vec<f64>>, treatment: Vec<u8>, outcome: Vec<u8>, column_names: Option<Vec<String>>) -> PyResult<Self> {
        let x = matrix(&covariates)?;
        let names = column_names.unwrap_or_else(|| (0..x.ncols()).map(|j| format!("x{}", j + 1)).collect());
        Ok(PyDataset {
            inner: tabular::Dataset::new(x, treatment, outcome, names).map_err(err)?,
        })
    }

    /// Reads a CSV, coding non-numeric covariates as dummies.
    #[staticmethod]
    #[pyo3(signature = (path, treatment="treatment", outcome="outcome"))]
    fn load_csv(path: PathBuf, treatment: &str, outcome: &str) -> PyResult<Self> {
        let inner = tabular::load_csv(path, &Schema::new(treatment, outcome)).map_err(err)?;
        Ok(PyDataset { inner })
    }

    fn save_csv(&self, path: PathBuf) -> PyResult<()> {
        tabular::save_csv(&self.inner, path).map_err(err)
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn p(&self) -> usize {
        self.inner.p()
    }

    #[getter]
    fn covariates(&self) -> Vec<Vec<f64>> {
        rows(self.inner.covariates())
    }

    #[getter]
    fn treatment(&self) -> Vec<u8> {
        self.inner.treatment().to_vec()
    }

    #[getter]
    fn outcome(&self) -> Vec<u8> {
        self.inner.outcome().to_vec()
    }

    #[getter]
    fn column_names(&self) -> Vec<String> {
        self.inner.column_names().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.n()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(n={}, p={})", self.inner.n(), self.inner.p())
    }
}

/// A simulated trial together with each subject's true arm risks.
#[pyclass(module = "hte", name = "SimulatedTrial", frozen, get_all)]
struct PySimulatedTrial {
    dataset: Py<PyDataset>,
    true_risk_control: Vec<f64>,
    true_risk_treated: Vec<f64>,
    true_delta: Vec<f64>,
}

fn dgm_config(n: usize, beta_t: f64, heterogeneous: bool, seed: u64, perturbation_seed: Option<u64>) -> DgmConfig {
    let defaults = DgmConfig::default();
    DgmConfig {
        n,
        beta_t,
        heterogeneous,
        run_seed: seed,
        perturbation_seed: perturbation_seed.unwrap_or(defaults.perturbation_seed),
        ..defaults
    }
}

/// Draws one trial from the simulation design.
#[pyfunction]
#[pyo3(signature = (n=1200, beta_t=0.6f64.ln(), heterogeneous=false, seed=0, perturbation_seed=None))]
fn simulate_trial(py: Python<'_>, n: usize, beta_t: f64, heterogeneous: bool, seed: u64, perturbation_seed: Option<u64>) -> PyResult<PySimulatedTrial> {
    let trial = dgm::gen_trial(&dgm_config(n, beta_t, heterogeneous, seed, perturbation_seed)).map_err(err)?;
    Ok(PySimulatedTrial {
        dataset: Py::new(py, PyDataset { inner: trial.dataset })?,
        true_risk_control: trial.true_risk_control,
        true_risk_treated: trial.true_risk_treated,
        true_delta: trial.true_delta,
    })
}

/// Nagelkerke R² of the true risks on a large simulated sample.
#[pyfunction]
#[pyo3(signature = (n_large=100_000, beta_t=0.6f64.ln(), heterogeneous=false, seed=0))]
fn oracle_r2(n_large: usize, beta_t: f64, heterogeneous: bool, seed: u64) -> PyResult<f64> {
    dgm::oracle_r2(&dgm_config(n_large, beta_t, heterogeneous, seed, None), n_large).map_err(err)
}

/// Intercept giving marginal prevalence `target` under compound-symmetric covariates.
#[pyfunction]
#[pyo3(signature = (beta, rho=0.1, target=0.25))]
fn solve_intercept(beta: Vec<f64>, rho: f64, target: f64) -> PyResult<f64> {
    let cov = dgm::compound_symmetry(beta.len(), rho).map_err(err)?;
    dgm::solve_intercept(&beta, &cov, target).map_err(err)
}

/// Identifiers of the built-in modeling strategies.
#[pyfunction]
fn strategy_ids() -> Vec<&'static str> {
    STRATEGY_IDS.to_vec()
}

/// A fitted strategy that predicts arm risks and risk differences.
#[pyclass(module = "hte", name = "Predictor", frozen)]
struct PyPredictor {
    inner: DeltaPredictor,
}

#[pymethods]
impl PyPredictor {
    #[getter]
    fn strategy(&self) -> String {
        self.inner.spec.id()
    }

    #[getter]
    fn n_covariates(&self) -> usize {
        self.inner.n_covariates
    }

    #[getter]
    fn lambdas(&self) -> Vec<f64> {
        self.inner.diagnostics.lambdas.clone()
    }

    #[getter]
    fn nonzero(&self) -> usize {
        self.inner.diagnostics.nonzero
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.diagnostics.converged
    }

    /// Predicted treated minus control risk for each row.
    fn predict_delta(&self, covariates: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        self.inner.predict_delta(&matrix(&covariates)?).map_err(err)
    }

    /// Predicted risk with every row assigned to `arm`.
    fn predict_arm_risk(&self, covariates: Vec<Vec<f64>>, arm: u8) -> PyResult<Vec<f64>> {
        self.inner.predict_arm_risk(&matrix(&covariates)?, arm).map_err(err)
    }

    /// Predicted risk under each row's own arm.
    fn predict_risk(&self, covariates: Vec<Vec<f64>>, treatment: Vec<u8>) -> PyResult<Vec<f64>> {
        self.inner.predict_risk(&matrix(&covariates)?, &treatment).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| HteError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = serde_json::from_str(text).map_err(|e| HteError::new_err(e.to_string()))?;
        Ok(PyPredictor { inner })
    }

    fn __repr__(&self) -> String {
        format!("Predictor(strategy={:?}, nonzero={})", self.inner.spec.id(), self.inner.diagnostics.nonzero)
    }
}

fn spec(strategy: &str) -> PyResult<StrategySpec> {
    StrategySpec::from_id(strategy).map_err(err)
}

/// Fits strategy `strategy` to `data`; `seed` drives cross-validation folds.
#[pyfunction]
#[pyo3(signature = (strategy, data, seed=0))]
fn fit(strategy: &str, data: &PyDataset, seed: u64) -> PyResult<PyPredictor> {
    let inner = fit_strategy(&spec(strategy)?, &data.inner, seed).map_err(err)?;
    Ok(PyPredictor { inner })
}

#[pyfunction]
fn rmspe(predicted: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    eval::rmspe(&predicted, &truth).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (predicted, truth, q=0.9))]
fn quantile_abs_error(predicted: Vec<f64>, truth: Vec<f64>, q: f64) -> PyResult<f64> {
    eval::quantile_abs_error(&predicted, &truth, q).map_err(err)
}

#[pyfunction]
fn brier(risk: Vec<f64>, outcome: Vec<u8>) -> PyResult<f64> {
    eval::brier(&risk, &outcome).map_err(err)
}

#[pyfunction]
fn c_statistic(risk: Vec<f64>, outcome: Vec<u8>) -> PyResult<f64> {
    eval::c_statistic(&risk, &outcome).map_err(err)
}

#[pyfunction]
fn nagelkerke_r2(risk: Vec<f64>, outcome: Vec<u8>) -> PyResult<f64> {
    eval::nagelkerke_from_risk(&risk, &outcome).map_err(err)
}

/// Bootstrap estimates of Brier score and Nagelkerke R², as a dict.
#[pyfunction]
#[pyo3(signature = (strategy, data, replicates=100, seed=0, mode="oob"))]
fn bootstrap_validate<'py>(py: Python<'py>, strategy: &str, data: &PyDataset, replicates: usize, seed: u64, mode: &str) -> PyResult<Bound<'py, PyAny>> {
    let mode = match mode {
        "oob" => BootstrapMode::OutOfBag,
        "optimism" => BootstrapMode::OptimismCorrected,
        other => return Err(PyValueError::new_err(format!("unknown bootstrap mode `{other}`, expected `oob` or `optimism`"))),
    };
    let summary = eval::bootstrap_validate(&data.inner, &spec(strategy)?, replicates, seed, mode).map_err(err)?;
    to_python(py, &summary)
}

/// Observed against predicted effect within quantile groups of predicted effect.
#[pyfunction]
#[pyo3(signature = (predictor, data, groups=5))]
fn te_calibration<'py>(py: Python<'py>, predictor: &PyPredictor, data: &PyDataset, groups: usize) -> PyResult<Bound<'py, PyAny>> {
    let groups = eval::te_quintile_calibration(&predictor.inner, &data.inner, groups).map_err(err)?;
    to_python(py, &groups)
}

/// Runs a simulation study into `out_dir` and returns its per-cell summary.
///
/// `plan` is a dict in the JSON plan format; the full factorial design with
/// `runs` repetitions is used when it is omitted.
#[pyfunction]
#[pyo3(signature = (out_dir, plan=None, runs=50, seed=0, resume=false))]
fn simulate_study<'py>(
    py: Python<'py>,
    out_dir: PathBuf,
    plan: Option<Bound<'py, PyAny>>,
    runs: usize,
    seed: u64,
    resume: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let plan = match plan {
        Some(obj) => {
            let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
            serde_json::from_str(&text).map_err(|e| PyValueError::new_err(format!("invalid study plan: {e}")))?
        }
        None => StudyPlan::full(runs, seed),
    };
    let options = RunOptions { resume, max_units: None };
    let output = py.detach(|| run_study(&plan, &out_dir, &options)).map_err(err)?;
    to_python(py, &output.summary)
}

#[pymodule]
fn hte(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("HteError", m.py().get_type::<HteError>())?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PySimulatedTrial>()?;
    m.add_class::<PyPredictor>()?;
    m.add_function(wrap_pyfunction!(simulate_trial, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_r2, m)?)?;
    m.add_function(wrap_pyfunction!(solve_intercept, m)?)?;
    m.add_function(wrap_pyfunction!(strategy_ids, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(rmspe, m)?)?;
    m.add_function(wrap_pyfunction!(quantile_abs_error, m)?)?;
    m.add_function(wrap_pyfunction!(brier, m)?)?;
    m.add_function(wrap_pyfunction!(c_statistic, m)?)?;
    m.add_function(wrap_pyfunction!(nagelkerke_r2, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap_validate, m)?)?;
    m.add_function(wrap_pyfunction!(te_calibration, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_study, m)?)?;
    Ok(())
}
