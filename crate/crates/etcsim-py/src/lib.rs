//! Python bindings for the event-triggered control simulator.
//!
//! The module mirrors the command-line surface: configurations travel as
//! JSON text in both directions, results come back as the same summary and
//! comparison documents the CLI writes to disk, and trajectories come back
//! as plain lists. Invalid configurations raise `ValueError`, runtime
//! divergence raises `RuntimeError`, and filesystem problems raise
//! `OSError`.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use etcsim_core::config::{self, ConfigDocument};
use etcsim_core::engine::{self, ModeSpec};
use etcsim_core::{output, Error};

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Parse(_) | Error::Validation(_) | Error::Precondition(_) | Error::Capability(_) => {
            PyValueError::new_err(e.to_string())
        }
        Error::Domain(_) | Error::NonFinite(_) | Error::Diverged { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
    }
}

/// Parse a configuration, apply the optional overrides, and pick the mode.
fn prepare(
    text: &str,
    mode: Option<&str>,
    period: Option<f64>,
    seed: Option<u64>,
    lenient: bool,
) -> PyResult<(ConfigDocument, ModeSpec)> {
    let (mut doc, _) = config::parse_document(text, !lenient).map_err(to_py_err)?;
    if let Some(seed) = seed {
        doc.seed = Some(seed);
    }
    let name = mode.or(doc.mode.as_deref()).ok_or_else(|| {
        PyValueError::new_err(
            "no update policy selected; pass mode= or set \"mode\" in the configuration",
        )
    })?;
    let spec = ModeSpec::parse(name, period).map_err(to_py_err)?;
    Ok((doc, spec))
}

/// The default configuration as JSON text.
#[pyfunction]
fn default_config() -> PyResult<String> {
    ConfigDocument::default().emit().map_err(to_py_err)
}

/// Validate configuration text; returns the warnings and raises
/// `ValueError` with every violation when the configuration is invalid.
#[pyfunction]
#[pyo3(signature = (text, lenient = false))]
fn validate(text: &str, lenient: bool) -> PyResult<Vec<String>> {
    let (_, _, warnings) = config::parse_and_validate(text, !lenient).map_err(to_py_err)?;
    Ok(warnings)
}

/// Run one simulation and return the summary document as JSON text.
#[pyfunction]
#[pyo3(signature = (text, mode = None, period = None, seed = None, lenient = false))]
fn simulate(
    text: &str,
    mode: Option<&str>,
    period: Option<f64>,
    seed: Option<u64>,
    lenient: bool,
) -> PyResult<String> {
    let (doc, spec) = prepare(text, mode, period, seed, lenient)?;
    let (scn, _) = doc.compile().map_err(to_py_err)?;
    let result = engine::run(&scn, spec).map_err(to_py_err)?;
    output::to_json_string(&result.summary_document()).map_err(to_py_err)
}

/// Run one simulation and return `(times, level1, level2)` sample lists.
#[pyfunction]
#[pyo3(signature = (text, mode = None, period = None, seed = None, lenient = false))]
fn simulate_levels(
    text: &str,
    mode: Option<&str>,
    period: Option<f64>,
    seed: Option<u64>,
    lenient: bool,
) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (doc, spec) = prepare(text, mode, period, seed, lenient)?;
    let (scn, _) = doc.compile().map_err(to_py_err)?;
    let result = engine::run(&scn, spec).map_err(to_py_err)?;
    let n = result.samples.len();
    let mut x1 = Vec::with_capacity(n);
    let mut x2 = Vec::with_capacity(n);
    for i in 0..n {
        let x = result.samples.state(i);
        x1.push(x[0]);
        x2.push(x[1]);
    }
    Ok((result.samples.times.clone(), x1, x2))
}

/// Run several update policies on one scenario and return the comparison
/// document as JSON text. `modes` defaults to all four policies; `period`
/// defaults to the configured minimum update spacing.
#[pyfunction]
#[pyo3(signature = (text, modes = None, period = None, lenient = false))]
fn compare(
    text: &str,
    modes: Option<Vec<String>>,
    period: Option<f64>,
    lenient: bool,
) -> PyResult<String> {
    let (doc, _) = config::parse_document(text, !lenient).map_err(to_py_err)?;
    let (scn, _) = doc.compile().map_err(to_py_err)?;
    let names = modes.unwrap_or_else(|| ModeSpec::NAMES.iter().map(|s| s.to_string()).collect());
    let period = period.unwrap_or(scn.trigger.tau_min);
    let specs = names
        .iter()
        .map(|n| ModeSpec::parse(n, Some(period)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(to_py_err)?;
    let report = engine::compare_modes(&scn, &specs).map_err(to_py_err)?;
    output::to_json_string(&report.document()).map_err(to_py_err)
}

#[pymodule]
fn etcsim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_levels, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add("SCHEMA_VERSION", config::SCHEMA_VERSION)?;
    m.add("MODE_NAMES", ModeSpec::NAMES.to_vec())?;
    Ok(())
}
