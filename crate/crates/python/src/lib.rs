//! Python bindings for `dualsmpc`.

use std::path::PathBuf;
use std::sync::Arc;

use dualsmpc::config::ExperimentConfig;
use dualsmpc::objective::{expected_quadratic as expected_quadratic_rs, expected_relu as expected_relu_rs};
use dualsmpc::model::QuadraticCost;
use dualsmpc::simulator::run_batch;
use dualsmpc::{LinearModel, Mode, ObjectiveOptions, Policy, SolveOptions, SolveResult, SystemModel, UnicycleModel, UnicycleParams};
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: dualsmpc::Error) -> PyErr {
    match e {
        dualsmpc::Error::Config(_) | dualsmpc::Error::RejectedInput(_) | dualsmpc::Error::Dimension(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err("matrix rows have different lengths"));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn vector(v: DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

fn mode(name: &str) -> PyResult<Mode> {
    Mode::parse(name).ok_or_else(|| PyValueError::new_err(format!("unknown controller {name:?}")))
}

fn to_python<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// `E[max(0, η)]` for `η ~ N(mu, sigma²)`.
#[pyfunction]
fn expected_relu(mu: f64, sigma: f64) -> PyResult<f64> {
    expected_relu_rs(mu, sigma).map_err(err)
}

/// Expected value of `½ zᵀHz + gᵀz + c` for `z ~ N(mean, cov)`.
#[pyfunction]
fn expected_quadratic(
    hessian: Vec<Vec<f64>>,
    gradient: Vec<f64>,
    constant: f64,
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
) -> PyResult<f64> {
    let cost = QuadraticCost::new(matrix(&hessian)?, DVector::from_vec(gradient), constant).map_err(err)?;
    expected_quadratic_rs(&cost, &DVector::from_vec(mean), &matrix(&cov)?).map_err(err)
}

/// A discrete-time system with its cost and constraints.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: Arc<dyn SystemModel>,
}

#[pymethods]
impl PyModel {
    /// Unicycle next to a wall; omitted arguments keep their defaults.
    #[staticmethod]
    #[pyo3(signature = (horizon_s=None, intervals=None, rk4_substeps=None, u_max=None, control_weight=None, violation_weight=None))]
    fn unicycle(
        horizon_s: Option<f64>,
        intervals: Option<usize>,
        rk4_substeps: Option<usize>,
        u_max: Option<[f64; 2]>,
        control_weight: Option<f64>,
        violation_weight: Option<f64>,
    ) -> PyResult<Self> {
        let d = UnicycleParams::default();
        let params = UnicycleParams {
            horizon_s: horizon_s.unwrap_or(d.horizon_s),
            intervals: intervals.unwrap_or(d.intervals),
            rk4_substeps: rk4_substeps.unwrap_or(d.rk4_substeps),
            u_max: u_max.unwrap_or(d.u_max),
            control_weight: control_weight.unwrap_or(d.control_weight),
            violation_weight: violation_weight.unwrap_or(d.violation_weight),
            ..d
        };
        Ok(Self {
            inner: Arc::new(UnicycleModel::new(params).map_err(err)?),
        })
    }

    /// Linear system with stage cost `½ xᵀQx + ½ uᵀRu` and terminal cost `½ xᵀQ_N x`.
    #[staticmethod]
    #[allow(clippy::too_many_arguments)]
    fn linear(
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        gamma: Vec<Vec<f64>>,
        c: Vec<Vec<f64>>,
        d: Vec<Vec<f64>>,
        horizon: usize,
        q: Vec<Vec<f64>>,
        r: Vec<Vec<f64>>,
        q_terminal: Vec<Vec<f64>>,
    ) -> PyResult<Self> {
        let model = LinearModel::with_lq_cost(
            matrix(&a)?,
            matrix(&b)?,
            matrix(&gamma)?,
            matrix(&c)?,
            matrix(&d)?,
            horizon,
            &matrix(&q)?,
            &matrix(&r)?,
            &matrix(&q_terminal)?,
        )
        .map_err(err)?;
        Ok(Self { inner: Arc::new(model) })
    }

    #[getter]
    fn n_x(&self) -> usize {
        self.inner.dims().n_x
    }

    #[getter]
    fn n_u(&self) -> usize {
        self.inner.dims().n_u
    }

    #[getter]
    fn n_y(&self) -> usize {
        self.inner.dims().n_y
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    #[pyo3(signature = (x, u, w=None, stage=0))]
    fn dynamics(&self, x: Vec<f64>, u: Vec<f64>, w: Option<Vec<f64>>, stage: usize) -> PyResult<Vec<f64>> {
        let w = w.map(DVector::from_vec).unwrap_or_else(|| DVector::zeros(self.inner.dims().n_w));
        self.inner
            .dynamics(stage, &DVector::from_vec(x), &DVector::from_vec(u), &w)
            .map(vector)
            .map_err(err)
    }

    #[pyo3(signature = (x, v=None, stage=1))]
    fn output(&self, x: Vec<f64>, v: Option<Vec<f64>>, stage: usize) -> PyResult<Vec<f64>> {
        let v = v.map(DVector::from_vec).unwrap_or_else(|| DVector::zeros(self.inner.dims().n_v));
        self.inner.output(stage, &DVector::from_vec(x), &v).map(vector).map_err(err)
    }

    /// Objective breakdown of `policy` from the belief `(x0, p0)`.
    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (x0, p0, policy, controller="output_feedback", eps_sigma=None, eps_k=None))]
    fn objective<'py>(
        &self,
        py: Python<'py>,
        x0: Vec<f64>,
        p0: Vec<Vec<f64>>,
        policy: &PyPolicy,
        controller: &str,
        eps_sigma: Option<f64>,
        eps_k: Option<f64>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let d = SolveOptions::default().with_mode(mode(controller)?).objective_options();
        let options = ObjectiveOptions {
            eps_sigma: eps_sigma.unwrap_or(d.eps_sigma),
            eps_k: eps_k.unwrap_or(d.eps_k),
            ..d
        };
        let breakdown = dualsmpc::total_objective(
            self.inner.as_ref(),
            &DVector::from_vec(x0),
            &matrix(&p0)?,
            &policy.inner,
            &options,
        )
        .map_err(err)?;
        to_python(py, &breakdown)
    }
}

/// Nominal controls and estimate-feedback gains `K_1 … K_{N−1}`.
#[pyclass(name = "Policy", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyPolicy {
    inner: Policy,
}

#[pymethods]
impl PyPolicy {
    #[new]
    #[pyo3(signature = (controls, feedback=None))]
    fn new(controls: Vec<Vec<f64>>, feedback: Option<Vec<Vec<Vec<f64>>>>) -> PyResult<Self> {
        let controls: Vec<DVector<f64>> = controls.into_iter().map(DVector::from_vec).collect();
        let inner = match feedback {
            Some(f) => Policy::new(controls, f.iter().map(|k| matrix(k)).collect::<PyResult<_>>()?).map_err(err)?,
            None => Policy::new(controls, Vec::new()).map_err(err)?,
        };
        Ok(Self { inner })
    }

    #[getter]
    fn controls(&self) -> Vec<Vec<f64>> {
        self.inner.controls().iter().map(|u| u.iter().copied().collect()).collect()
    }

    /// All gains `K_0 … K_{N−1}`, with `K_0 = 0`.
    #[getter]
    fn gains(&self) -> Vec<Vec<Vec<f64>>> {
        self.inner.gains().iter().map(rows).collect()
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }
}

#[pyclass(name = "SolveResult", frozen)]
struct PySolveResult {
    inner: SolveResult,
}

#[pymethods]
impl PySolveResult {
    #[getter]
    fn status(&self) -> String {
        format!("{:?}", self.inner.status)
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.status.is_converged()
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    #[getter]
    fn stationarity(&self) -> f64 {
        self.inner.stationarity
    }

    #[getter]
    fn objective(&self) -> f64 {
        self.inner.objective.total
    }

    #[getter]
    fn breakdown<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_python(py, &self.inner.objective)
    }

    #[getter]
    fn beta(&self) -> Vec<Vec<f64>> {
        self.inner.beta.clone()
    }

    #[getter]
    fn history(&self) -> Vec<f64> {
        self.inner.history.clone()
    }

    #[getter]
    fn policy(&self) -> PyPolicy {
        PyPolicy {
            inner: self.inner.policy.clone(),
        }
    }
}

/// Solves the open-loop optimal control problem from the belief `(x0, p0)`.
#[pyfunction]
#[pyo3(signature = (model, x0, p0, controller="output_feedback", warm_start=None, max_iterations=None, tolerance=None, eps_k=None))]
#[allow(clippy::too_many_arguments)]
fn solve(
    py: Python<'_>,
    model: &PyModel,
    x0: Vec<f64>,
    p0: Vec<Vec<f64>>,
    controller: &str,
    warm_start: Option<PyRef<'_, PyPolicy>>,
    max_iterations: Option<usize>,
    tolerance: Option<f64>,
    eps_k: Option<f64>,
) -> PyResult<PySolveResult> {
    let d = SolveOptions::default().with_mode(mode(controller)?);
    let options = SolveOptions {
        max_iterations: max_iterations.unwrap_or(d.max_iterations),
        tolerance: tolerance.unwrap_or(d.tolerance),
        eps_k: eps_k.unwrap_or(d.eps_k),
        ..d
    };
    let x0 = DVector::from_vec(x0);
    let p0 = matrix(&p0)?;
    let inner = model.inner.clone();
    let warm = warm_start.map(|p| p.inner.clone());
    let result = py
        .detach(move || dualsmpc::solve(inner.as_ref(), &x0, &p0, &options, warm.as_ref()))
        .map_err(err)?;
    Ok(PySolveResult { inner: result })
}

/// A parsed experiment configuration.
#[pyclass(name = "Experiment", frozen)]
struct PyExperiment {
    config: ExperimentConfig,
}

#[pymethods]
impl PyExperiment {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            config: ExperimentConfig::parse(text).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            config: ExperimentConfig::load(&path).map_err(err)?,
        })
    }

    fn model(&self) -> PyResult<PyModel> {
        Ok(PyModel {
            inner: Arc::from(self.config.build_model().map_err(err)?),
        })
    }

    /// Initial belief as `(mean, covariance)`.
    fn initial_belief(&self) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
        let b = self.config.initial_belief().map_err(err)?;
        Ok((vector(b.mean), rows(&b.covariance)))
    }

    #[getter]
    fn controllers(&self) -> Vec<&'static str> {
        self.config.controllers().iter().map(|m| m.name()).collect()
    }

    /// Solves from the configured initial belief.
    fn solve(&self, py: Python<'_>, controller: &str) -> PyResult<PySolveResult> {
        let options = self.config.solve_options(mode(controller)?);
        let model = self.config.build_model().map_err(err)?;
        let belief = self.config.initial_belief().map_err(err)?;
        let result = py
            .detach(move || dualsmpc::solve(model.as_ref(), &belief.mean, &belief.covariance, &options, None))
            .map_err(err)?;
        Ok(PySolveResult { inner: result })
    }

    /// Closed-loop Monte-Carlo batch; returns `{"summary": ..., "records": [...]}`.
    #[pyo3(signature = (controller, runs=None, seed=None, steps=None))]
    fn simulate<'py>(
        &self,
        py: Python<'py>,
        controller: &str,
        runs: Option<usize>,
        seed: Option<u64>,
        steps: Option<usize>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let options = self.config.solve_options(mode(controller)?);
        let model = self.config.build_model().map_err(err)?;
        let mut sim = self.config.sim_config().map_err(err)?;
        sim.runs = runs.unwrap_or(sim.runs);
        sim.master_seed = seed.unwrap_or(sim.master_seed);
        sim.steps = steps.unwrap_or(sim.steps);
        let batch = py
            .detach(move || run_batch(model.as_ref(), model.as_ref(), &options, &sim))
            .map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("summary", to_python(py, &batch.summary)?)?;
        out.set_item("records", to_python(py, &batch.records)?)?;
        Ok(out)
    }
}

#[pymodule(name = "dualsmpc")]
fn dualsmpc_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(expected_relu, m)?)?;
    m.add_function(wrap_pyfunction!(expected_quadratic, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyPolicy>()?;
    m.add_class::<PySolveResult>()?;
    m.add_class::<PyExperiment>()?;
    Ok(())
}
