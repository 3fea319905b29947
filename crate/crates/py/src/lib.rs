//! Python bindings. Structured inputs and outputs cross the boundary as
//! plain dicts and lists with the same field names as the JSON files the
//! command-line tool writes.

use std::path::PathBuf;

use clap::Parser;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use saber_cli::commands::{prepare_output, run_pipeline as run_all, simulate_with};
use saber_cli::{Cli, CliError, PipelineConfig};
use saber_core::simgen::{PlanOverrides, SimParams};
use serde::de::DeserializeOwned;
use serde::Serialize;

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned + Default>(obj: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    let Some(obj) = obj.filter(|o| !o.is_none()) else {
        return Ok(T::default());
    };
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn cli_err(e: CliError) -> PyErr {
    match e {
        CliError::Usage(m) => PyValueError::new_err(m),
        CliError::Runtime(e) => PyRuntimeError::new_err(format!("{e:#}")),
    }
}

fn core_err(e: saber_core::Error) -> PyErr {
    match e {
        saber_core::Error::Config(_) | saber_core::Error::InvalidInput(_) | saber_core::Error::Unsatisfiable(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Response of the basis channel centred at `center_deg` to a stimulus at
/// `theta_deg`.
#[pyfunction]
#[pyo3(signature = (theta_deg, center_deg, exponent = 7))]
fn basis_response(theta_deg: f64, center_deg: f64, exponent: i32) -> f64 {
    saber_core::iem::basis_response(theta_deg, center_deg, exponent)
}

/// Slope of a folded channel response function `[0, 60, 120, 180]`.
#[pyfunction]
fn crf_slope(folded: [f64; 4]) -> f64 {
    saber_core::iem::crf_slope(&folded)
}

/// `(ipsi - contra) / (ipsi + contra)`, or `None` when undefined.
#[pyfunction]
fn lateralization_index(ipsi: f64, contra: f64) -> Option<f64> {
    saber_core::lateralization::lateralization_index(ipsi, contra)
}

/// Paired sign-flip permutation t-test.
#[pyfunction]
#[pyo3(signature = (a, b, n_iter = 1000, seed = 0))]
fn perm_ttest_paired<'py>(py: Python<'py>, a: Vec<f64>, b: Vec<f64>, n_iter: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let r = saber_core::stats::perm_ttest_paired(&a, &b, n_iter, seed).map_err(core_err)?;
    to_py(py, &r)
}

/// Trial plan for `seed`; `plan` overrides the defaults (conditions,
/// blocks_per_condition, trials_per_block, bins, ...).
#[pyfunction]
#[pyo3(signature = (seed, plan = None))]
fn generate_trial_plan<'py>(py: Python<'py>, seed: u64, plan: Option<&Bound<'py, PyAny>>) -> PyResult<Bound<'py, PyAny>> {
    let overrides: PlanOverrides = from_py(plan)?;
    let plan = saber_core::simgen::generate_trial_plan(seed, &overrides).map_err(core_err)?;
    to_py(py, &plan)
}

/// Write a synthetic dataset to `out`. Returns the trial plan.
#[pyfunction]
#[pyo3(signature = (out, seed, rate_hz = 1000.0, plan = None, params = None, force = false))]
fn simulate<'py>(
    py: Python<'py>,
    out: PathBuf,
    seed: u64,
    rate_hz: f64,
    plan: Option<&Bound<'py, PyAny>>,
    params: Option<&Bound<'py, PyAny>>,
    force: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let overrides: PlanOverrides = from_py(plan)?;
    let params: SimParams = from_py(params)?;
    let (plan, _) = py
        .detach(|| simulate_with(seed, &out, force, rate_hz, params, &overrides))
        .map_err(cli_err)?;
    to_py(py, &plan)
}

/// Run every enabled stage for the configured inputs and return the report.
/// `config` has the layout of the JSON configuration file; `inputs` and
/// `output` are required.
#[pyfunction]
#[pyo3(signature = (config, seed = None, force = false))]
fn run_pipeline<'py>(py: Python<'py>, config: &Bound<'py, PyAny>, seed: Option<u64>, force: bool) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg: PipelineConfig = from_py(Some(config))?;
    let seed = cfg.resolve_seed(seed).map_err(cli_err)?;
    cfg.validate().map_err(cli_err)?;
    let out = cfg.output.clone().expect("validated");
    let report = py
        .detach(|| {
            prepare_output(&out, force)?;
            run_all(&cfg, seed, &out)
        })
        .map_err(cli_err)?;
    to_py(py, &report)
}

/// Run the command-line tool with `args` (without the program name) and
/// return its exit code.
#[pyfunction]
fn cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv = std::iter::once("saber".to_string()).chain(args);
    let parsed = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match py.detach(|| saber_cli::dispatch(parsed)) {
        Ok(code) => code as i32,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code() as i32
        }
    }
}

#[pymodule]
fn saber(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(basis_response, m)?)?;
    m.add_function(wrap_pyfunction!(crf_slope, m)?)?;
    m.add_function(wrap_pyfunction!(lateralization_index, m)?)?;
    m.add_function(wrap_pyfunction!(perm_ttest_paired, m)?)?;
    m.add_function(wrap_pyfunction!(generate_trial_plan, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    Ok(())
}
