use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use hydro_dmpc::bnb::{two_phase_solve, DEFAULT_COMPLEMENTARITY_TOL};
use hydro_dmpc::model::default_pipeline;
use hydro_dmpc::mpc::{default_reference, MpcScenario, Scheme};
use hydro_dmpc::problem::{validate_problem, PartitionedQP};
use hydro_dmpc::sim::run_comparison_suite;
use hydro_dmpc::solver::{SolverOptions, StoppingRule};
use hydro_dmpc::Error;

fn to_py(err: Error) -> PyErr {
    match err {
        Error::InvalidParameter(_) | Error::InvalidProblem(_) | Error::Dimension(_) | Error::Json(_) => {
            PyValueError::new_err(err.to_string())
        }
        _ => PyRuntimeError::new_err(err.to_string()),
    }
}

/// Total transmitted bits: the product of its four factors.
#[pyfunction]
fn communication_accounting(vars_per_iter: u64, bits_per_var: u64, iterations: u64, solves_per_step: u64) -> u64 {
    hydro_dmpc::network::communication_accounting(vars_per_iter, bits_per_var, iterations, solves_per_step)
}

/// Solves a partitioned QP given as JSON and returns the outcome as JSON.
#[pyfunction]
#[pyo3(signature = (problem_json, tol=1e-3, fixed_iterations=None))]
fn solve(problem_json: &str, tol: f64, fixed_iterations: Option<usize>) -> PyResult<String> {
    let qp: PartitionedQP = serde_json::from_str(problem_json).map_err(|e| to_py(e.into()))?;
    let report = validate_problem(&qp);
    if !report.is_valid() {
        return Err(PyValueError::new_err(format!("invalid problem: {report:?}")));
    }
    let stop = StoppingRule {
        eq_tol: tol,
        ineq_tol: tol,
        fixed_iterations,
        ..StoppingRule::default()
    };
    let opts = SolverOptions { stop, ..SolverOptions::default() };
    let out = two_phase_solve(&qp, &[], None, &opts, DEFAULT_COMPLEMENTARITY_TOL).map_err(to_py)?;
    out.to_json().map_err(to_py)
}

/// Reduced order of every subsystem of the default valley.
#[pyfunction]
fn reduced_orders() -> PyResult<Vec<usize>> {
    let pipe = default_pipeline().map_err(to_py)?;
    pipe.model
        .subsystems
        .iter()
        .map(|s| s.reduced().map(|r| r.order()).map_err(to_py))
        .collect()
}

/// Closed-loop run of one scheme on the default valley; returns the summary row as JSON.
#[pyfunction]
#[pyo3(signature = (scheme, steps=48, seed=0, horizon=10))]
fn simulate(py: Python<'_>, scheme: &str, steps: usize, seed: u64, horizon: usize) -> PyResult<String> {
    let scheme: Scheme = scheme.parse().map_err(to_py)?;
    py.detach(|| {
        let pipe = default_pipeline().map_err(to_py)?;
        let sc = MpcScenario {
            scheme,
            steps,
            horizon,
            reference: default_reference(pipe.power.steady_total(), 0.3, 1800.0),
            ..MpcScenario::default()
        };
        let report = run_comparison_suite(&pipe, &sc, &[scheme], seed).map_err(to_py)?;
        serde_json::to_string(&report.rows[0]).map_err(|e| to_py(e.into()))
    })
}

#[pymodule]
fn hydro_dmpc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(communication_accounting, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(reduced_orders, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
