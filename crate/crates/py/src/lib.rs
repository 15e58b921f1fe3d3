//! Python bindings: task loading, routing, prompt assembly and metric arithmetic.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::str::FromStr;

use mmtb_core::analysis::{partition_passes, tag_cooccurrence as core_tags};
use mmtb_core::metrics::{uniform_cost as core_cost, ModelRates};
use mmtb_core::model_backend::Usage;
use mmtb_core::routing::{self, DEFAULT_SCAN_DEPTH};
use mmtb_core::{HarnessVariant, Modality};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use rust_decimal::Decimal;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn harness(name: &str) -> PyResult<HarnessVariant> {
    name.parse().map_err(err)
}

#[pyclass(name = "TaskSpec", frozen, get_all)]
pub struct PyTaskSpec {
    task_id: String,
    instruction: String,
    threshold: f64,
    budget_seconds: u64,
    environment_ref: String,
    output_paths: Vec<String>,
    capability_tags: Vec<String>,
    required_modalities: Vec<String>,
    workspace: PathBuf,
}

#[pymethods]
impl PyTaskSpec {
    fn __repr__(&self) -> String {
        format!(
            "TaskSpec(task_id={:?}, threshold={})",
            self.task_id, self.threshold
        )
    }
}

#[pyfunction]
fn load_task(path: PathBuf) -> PyResult<PyTaskSpec> {
    let s = mmtb_core::load_task(&path).map_err(err)?;
    Ok(PyTaskSpec {
        task_id: s.task_id,
        instruction: s.instruction,
        threshold: s.threshold,
        budget_seconds: s.budget_seconds,
        environment_ref: s.environment_ref,
        output_paths: s.output_paths,
        capability_tags: s.capability_tags.into_iter().collect(),
        required_modalities: s
            .required_modalities
            .iter()
            .map(|m| m.to_string())
            .collect(),
        workspace: s.workspace_seed,
    })
}

#[pyfunction]
#[pyo3(signature = (workspace, max_depth = DEFAULT_SCAN_DEPTH))]
fn scan_modalities(workspace: PathBuf, max_depth: usize) -> PyResult<Vec<String>> {
    let m = routing::scan_modalities(&workspace, max_depth).map_err(err)?;
    Ok(m.iter().map(|m| m.to_string()).collect())
}

#[pyfunction]
fn route_tools(modalities: Vec<String>) -> PyResult<Vec<String>> {
    let set = modalities
        .iter()
        .map(|m| Modality::from_str(m).map_err(err))
        .collect::<PyResult<BTreeSet<_>>>()?;
    Ok(routing::route_tools(&set)
        .iter()
        .map(|t| t.to_string())
        .collect())
}

#[pyfunction]
fn effective_schema(harness_name: &str, workspace: PathBuf) -> PyResult<Vec<String>> {
    let schema = routing::effective_schema(harness(harness_name)?, &workspace).map_err(err)?;
    Ok(schema.tools.iter().map(|t| t.name.to_string()).collect())
}

#[pyfunction]
#[pyo3(signature = (harness_name, workspace, instruction, terminal_state = "/workspace$ "))]
fn build_prompt(
    harness_name: &str,
    workspace: PathBuf,
    instruction: &str,
    terminal_state: &str,
) -> PyResult<String> {
    let h = harness(harness_name)?;
    let schema = routing::effective_schema(h, &workspace).map_err(err)?;
    Ok(routing::build_prompt(
        h,
        &schema,
        instruction,
        terminal_state,
    ))
}

/// Pass fraction for parallel score and threshold lists.
#[pyfunction]
fn binary_rate(scores: Vec<f64>, thresholds: Vec<f64>) -> PyResult<f64> {
    if scores.is_empty() || scores.len() != thresholds.len() {
        return Err(PyValueError::new_err(
            "scores and thresholds must be non-empty and equal length",
        ));
    }
    let passed = scores
        .iter()
        .zip(&thresholds)
        .filter(|(s, t)| s >= t)
        .count();
    Ok(passed as f64 / scores.len() as f64)
}

#[pyfunction]
fn partial_rate(scores: Vec<f64>) -> PyResult<f64> {
    if scores.is_empty() {
        return Err(PyValueError::new_err("scores must be non-empty"));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Cost in USD as a decimal string. Rates are decimal strings per token.
#[pyfunction]
fn uniform_cost(
    input_tokens: u64,
    output_tokens: u64,
    input_rate: &str,
    output_rate: &str,
) -> PyResult<String> {
    let rates = ModelRates {
        input_per_token: Decimal::from_str(input_rate).map_err(err)?,
        output_per_token: Decimal::from_str(output_rate).map_err(err)?,
    };
    let usage = Usage {
        input_tokens,
        cached_tokens: 0,
        output_tokens,
    };
    Ok(core_cost(&usage, &rates).to_string())
}

/// `(both, a_only, b_only, neither)` as sorted task-id lists.
#[pyfunction]
fn regime_partition(
    suite: Vec<String>,
    pass_a: Vec<String>,
    pass_b: Vec<String>,
) -> (Vec<String>, Vec<String>, Vec<String>, Vec<String>) {
    let set = |v: Vec<String>| v.into_iter().collect::<BTreeSet<_>>();
    let p = partition_passes(&set(suite), &set(pass_a), &set(pass_b));
    let list = |s: BTreeSet<String>| s.into_iter().collect();
    (
        list(p.both_solve),
        list(p.a_only),
        list(p.b_only),
        list(p.both_fail),
    )
}

#[pyfunction]
fn tag_cooccurrence(tag_sets: Vec<Vec<String>>) -> BTreeMap<(String, String), usize> {
    let sets: Vec<BTreeSet<String>> = tag_sets
        .into_iter()
        .map(|v| v.into_iter().collect())
        .collect();
    core_tags(&sets).pairs
}

#[pymodule]
fn mmtb(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTaskSpec>()?;
    m.add_function(wrap_pyfunction!(load_task, m)?)?;
    m.add_function(wrap_pyfunction!(scan_modalities, m)?)?;
    m.add_function(wrap_pyfunction!(route_tools, m)?)?;
    m.add_function(wrap_pyfunction!(effective_schema, m)?)?;
    m.add_function(wrap_pyfunction!(build_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(binary_rate, m)?)?;
    m.add_function(wrap_pyfunction!(partial_rate, m)?)?;
    m.add_function(wrap_pyfunction!(uniform_cost, m)?)?;
    m.add_function(wrap_pyfunction!(regime_partition, m)?)?;
    m.add_function(wrap_pyfunction!(tag_cooccurrence, m)?)?;
    Ok(())
}
