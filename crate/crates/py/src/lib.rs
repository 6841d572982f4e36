//! Python bindings: search-space counting, parameter counting, gamma and
//! Delta_T scoring, and the command pipeline.

use std::path::Path;

use mtnas::error::Error;
use mtnas::evolution_search::{delta_t as delta_t_impl, gamma_population};
use mtnas::orchestrator::{cmd_report, cmd_search, cmd_train, CommandError, RunConfig};
use mtnas::search_space::{self as space, CellConfig, CellSpace, Preset, ScaleMode, Skeleton, SkeletonFile};
use mtnas::tasks::{default_tasks, MetricKind, MetricSpec, MetricTable};
use num_bigint::BigUint;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyOSError::new_err(e.to_string()),
        Error::Config(_) | Error::Argument(_) | Error::Constraint(_) | Error::Shape(_) | Error::Metric(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn cmd_err(e: CommandError) -> PyErr {
    match e.code {
        2 => PyValueError::new_err(e.message),
        _ => PyRuntimeError::new_err(e.message),
    }
}

fn mode(s: &str) -> PyResult<ScaleMode> {
    s.parse().map_err(py_err)
}

fn skeleton(mode_name: &str, outputs: Vec<String>) -> PyResult<Skeleton> {
    let file = SkeletonFile { version: space::FORMAT_VERSION, mode: mode(mode_name)?, outputs };
    Skeleton::try_from(&file).map_err(py_err)
}

fn layout(lower_is_better: &[Vec<bool>]) -> Vec<Vec<MetricSpec>> {
    lower_is_better
        .iter()
        .map(|task| {
            task.iter()
                .enumerate()
                .map(|(j, &lower)| MetricSpec {
                    name: format!("m{j}"),
                    kind: if lower { MetricKind::MeanL1 } else { MetricKind::Accuracy },
                    lower_is_better: lower,
                })
                .collect()
        })
        .collect()
}

/// Output layers of every skeleton for "single" or "multi" mode.
#[pyfunction]
fn enumerate_skeletons(mode_name: &str) -> PyResult<Vec<Vec<String>>> {
    Ok(space::enumerate_skeletons(mode(mode_name)?)
        .iter()
        .map(|s| s.outputs().iter().map(|l| l.id()).collect())
        .collect())
}

/// Number of skeleton assignments for `n_tasks` tasks.
#[pyfunction]
fn space_cardinality(mode_name: &str, n_tasks: u32) -> PyResult<BigUint> {
    space::space_cardinality(mode(mode_name)?, n_tasks).map_err(py_err)
}

/// Component ids of the union of per-task skeletons, in execution order.
#[pyfunction]
fn union_components(mode_name: &str, skeletons: Vec<Vec<String>>) -> PyResult<Vec<String>> {
    let sk = skeletons.into_iter().map(|o| skeleton(mode_name, o)).collect::<PyResult<Vec<_>>>()?;
    Ok(space::union_skeletons(&sk).map_err(py_err)?.component_ids())
}

/// Exact parameter count of a subnet for the default four tasks.
#[pyfunction]
#[pyo3(signature = (mode_name, skeletons, cell_config_json, preset = "desk"))]
fn count_params(mode_name: &str, skeletons: Vec<Vec<String>>, cell_config_json: &str, preset: &str) -> PyResult<usize> {
    let sk = skeletons.into_iter().map(|o| skeleton(mode_name, o)).collect::<PyResult<Vec<_>>>()?;
    let graph = space::union_skeletons(&sk).map_err(py_err)?;
    let cfg = CellConfig::from_json(cell_config_json).map_err(py_err)?;
    let space = CellSpace::from_preset(preset.parse::<Preset>().map_err(py_err)?);
    let heads: Vec<_> = default_tasks().into_iter().take(graph.num_tasks()).map(|t| t.head).collect();
    space::count_params(&graph, &cfg, &space, &heads).map_err(py_err)
}

/// Gamma of every population member. `values[i][k][j]` is metric `j` of
/// task `k` for member `i`.
#[pyfunction]
fn gamma(values: Vec<Vec<Vec<f64>>>, lower_is_better: Vec<Vec<bool>>) -> PyResult<Vec<f64>> {
    let pop: Vec<MetricTable> = values.into_iter().map(|v| MetricTable { values: v }).collect();
    gamma_population(&pop, &layout(&lower_is_better)).map_err(py_err)
}

/// Delta_T in percent against single-task baselines.
#[pyfunction]
fn delta_t(model: Vec<Vec<f64>>, baseline: Vec<Vec<f64>>, lower_is_better: Vec<Vec<bool>>) -> PyResult<f64> {
    delta_t_impl(&MetricTable { values: model }, &MetricTable { values: baseline }, &layout(&lower_is_better))
        .map_err(py_err)
}

/// SHA-256 of a run config file, as written into every artifact.
#[pyfunction]
fn config_hash(path: &str) -> PyResult<String> {
    Ok(RunConfig::load(Path::new(path)).map_err(py_err)?.hash())
}

/// Runs `train`, `search` or `report` and returns the output directory.
#[pyfunction]
#[pyo3(signature = (command, config, seed = None, single_task = false, budgets = Vec::new()))]
fn run(
    py: Python<'_>,
    command: &str,
    config: &str,
    seed: Option<u64>,
    single_task: bool,
    budgets: Vec<usize>,
) -> PyResult<String> {
    let mut cfg = RunConfig::load(Path::new(config)).map_err(py_err)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let out = py.detach(|| match command {
        "train" => cmd_train(&cfg, single_task),
        "search" => cmd_search(&cfg, &budgets),
        "report" => cmd_report(&cfg),
        other => Err(CommandError { code: 2, message: format!("unknown command {other:?}") }),
    });
    out.map(|p| p.display().to_string()).map_err(cmd_err)
}

#[pymodule]
fn mtnas_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(enumerate_skeletons, m)?)?;
    m.add_function(wrap_pyfunction!(space_cardinality, m)?)?;
    m.add_function(wrap_pyfunction!(union_components, m)?)?;
    m.add_function(wrap_pyfunction!(count_params, m)?)?;
    m.add_function(wrap_pyfunction!(gamma, m)?)?;
    m.add_function(wrap_pyfunction!(delta_t, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
