//! Seeded closed-loop Monte-Carlo harness.
//!
//! Each run simulates the true stochastic system, filters its measurements
//! with an EKF, and closes the loop with a receding-horizon controller.
//! Closed-loop models are treated as time invariant: the plant is stepped
//! with stage index 0 and measured with stage index 1.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{Controller, StepDiagnostics};
use crate::error::{Error, Result};
use crate::estimation::{ekf_predict, ekf_update, BeliefState};
use crate::linalg::psd_factor;
use crate::model::SystemModel;
use crate::rng::{DrawSlot, StreamKey};
use crate::solver::SolveOptions;

const DIVERGENCE_NORM: f64 = 1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub steps: usize,
    pub runs: usize,
    pub master_seed: u64,
    /// Belief handed to the controller at `t = 0`.
    pub initial_belief: BeliefState,
    /// Distribution of the true initial state; defaults to the initial belief.
    pub true_initial: Option<BeliefState>,
}

impl SimConfig {
    pub fn new(initial_belief: BeliefState) -> Self {
        Self {
            steps: 20,
            runs: 20,
            master_seed: 0,
            initial_belief,
            true_initial: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.runs == 0 {
            return Err(Error::RejectedInput("steps and runs must be at least 1".into()));
        }
        Ok(())
    }
}

/// One closed-loop step `t → t+1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// `t + 1`.
    pub step: usize,
    /// True state `x_{t+1}`.
    pub state: DVector<f64>,
    /// Posterior belief after measuring `y_{t+1}`.
    pub belief_mean: DVector<f64>,
    pub belief_cov: DMatrix<f64>,
    /// Control `u_t` applied from the belief at `t`.
    pub control: DVector<f64>,
    /// `l(x_t, u_t) + Σ ρ_i max(0, h_i(x_{t+1}, u_t))`.
    pub stage_cost: f64,
    /// Stage constraint values `h_i(x_{t+1}, u_t)`.
    pub constraints: Vec<f64>,
    pub violation: bool,
    pub diagnostics: StepDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopRecord {
    pub run_index: usize,
    pub initial_state: DVector<f64>,
    pub steps: Vec<StepRecord>,
    pub total_cost: f64,
    pub violation_count: usize,
    pub diverged: bool,
    pub flagged_solves: usize,
}

/// Realized stage cost and constraint values of one transition.
fn realized_cost<M: SystemModel + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    u: &DVector<f64>,
    x_next: &DVector<f64>,
) -> (f64, Vec<f64>) {
    let z = DVector::from_iterator(x.len() + u.len(), x.iter().chain(u.iter()).copied());
    let mut cost = model.stage_cost(0).eval(&z);
    let mut values = Vec::new();
    for c in model.constraints().stage() {
        let h = c.function.value(x_next, u);
        cost += c.weight * h.max(0.0);
        values.push(h);
    }
    (cost, values)
}

fn draw_initial_state(dist: &BeliefState, key: &StreamKey) -> Result<DVector<f64>> {
    let l = psd_factor(&dist.covariance)
        .ok_or_else(|| Error::RejectedInput("initial covariance is not positive semidefinite".into()))?;
    let zeta = key.standard_normals(0, DrawSlot::InitialState, dist.mean.len());
    Ok(&dist.mean + l * zeta)
}

/// Runs one closed-loop trajectory. The plant is sampled only with the
/// run's own random streams; the controller only sees the EKF belief.
pub fn simulate_run<P, M>(
    plant: &P,
    model: &M,
    options: &SolveOptions,
    config: &SimConfig,
    run_index: usize,
) -> Result<ClosedLoopRecord>
where
    P: SystemModel + ?Sized,
    M: SystemModel + ?Sized,
{
    config.validate()?;
    let dims = plant.dims();
    let key = StreamKey::new(config.master_seed, run_index as u64);
    let true_initial = config.true_initial.as_ref().unwrap_or(&config.initial_belief);
    let mut x = draw_initial_state(true_initial, &key)?;
    let initial_state = x.clone();
    let mut belief = config.initial_belief.clone();
    let mut controller = Controller::new(*options);

    let mut steps = Vec::with_capacity(config.steps);
    let mut diverged = false;
    for t in 0..config.steps {
        let (u, diagnostics) = controller.step(model, &belief)?;
        let w = key.standard_normals(t as u64, DrawSlot::Process, dims.n_w);
        let v = key.standard_normals(t as u64, DrawSlot::Measurement, dims.n_v);
        let next = plant.dynamics(0, &x, &u, &w).and_then(|xn| {
            let y = plant.output(1, &xn, &v)?;
            Ok((xn, y))
        });
        let Ok((x_next, y)) = next else {
            diverged = true;
            break;
        };
        if !x_next.iter().all(|v| v.is_finite()) || x_next.norm() > DIVERGENCE_NORM {
            diverged = true;
            break;
        }
        let updated = ekf_predict(model, &belief, &u, 0).and_then(|b| ekf_update(model, &b, &y, 1));
        let Ok(updated) = updated else {
            diverged = true;
            break;
        };
        let (stage_cost, constraints) = realized_cost(plant, &x, &u, &x_next);
        let violation = constraints.iter().any(|h| *h > 0.0);
        steps.push(StepRecord {
            step: t + 1,
            state: x_next.clone(),
            belief_mean: updated.mean.clone(),
            belief_cov: updated.covariance.clone(),
            control: u,
            stage_cost,
            constraints,
            violation,
            diagnostics,
        });
        x = x_next;
        belief = updated;
    }
    let total_cost = steps.iter().map(|s| s.stage_cost).sum();
    let violation_count = steps.iter().filter(|s| s.violation).count();
    let flagged_solves = steps.iter().filter(|s| s.diagnostics.flagged).count();
    Ok(ClosedLoopRecord {
        run_index,
        initial_state,
        steps,
        total_cost,
        violation_count,
        diverged,
        flagged_solves,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub controller: String,
    pub runs: usize,
    pub diverged_runs: usize,
    pub realized_cost_mean: f64,
    pub realized_cost_std: f64,
    /// Mean realized stage cost over all recorded `(run, step)` pairs.
    pub mean_stage_cost: f64,
    /// Fraction of `(run, step)` pairs with any `h_i > 0` on the true state.
    pub violation_frequency: f64,
    pub violation_count: usize,
    pub step_count: usize,
    /// Mean slack of the pure-state (terminal-type) constraints on the true state.
    pub mean_backoff: f64,
    pub mean_trace_p_hat: f64,
    pub flagged_solves: usize,
}

/// Aggregates records in run-index order.
pub fn summarize<M: SystemModel + ?Sized>(model: &M, controller: &str, records: &[ClosedLoopRecord]) -> MetricsSummary {
    let mut sorted: Vec<&ClosedLoopRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.run_index);
    let runs = sorted.len();
    let costs: Vec<f64> = sorted.iter().map(|r| r.total_cost).collect();
    let cost_mean = costs.iter().sum::<f64>() / runs.max(1) as f64;
    let cost_std = if runs > 1 {
        (costs.iter().map(|c| (c - cost_mean).powi(2)).sum::<f64>() / (runs - 1) as f64).sqrt()
    } else {
        0.0
    };
    let empty_u = DVector::zeros(0);
    let state_constraints = model.constraints().terminal();
    let mut step_count = 0usize;
    let mut violation_count = 0usize;
    let mut stage_cost_sum = 0.0;
    let mut backoff_sum = 0.0;
    let mut trace_sum = 0.0;
    for r in &sorted {
        for s in &r.steps {
            step_count += 1;
            violation_count += s.violation as usize;
            stage_cost_sum += s.stage_cost;
            trace_sum += s.belief_cov.trace();
            let worst = state_constraints
                .iter()
                .map(|c| c.function.value(&s.state, &empty_u))
                .fold(f64::NEG_INFINITY, f64::max);
            backoff_sum += if worst.is_finite() { -worst } else { 0.0 };
        }
    }
    let denom = step_count.max(1) as f64;
    MetricsSummary {
        controller: controller.to_string(),
        runs,
        diverged_runs: sorted.iter().filter(|r| r.diverged).count(),
        realized_cost_mean: cost_mean,
        realized_cost_std: cost_std,
        mean_stage_cost: stage_cost_sum / denom,
        violation_frequency: violation_count as f64 / denom,
        violation_count,
        step_count,
        mean_backoff: backoff_sum / denom,
        mean_trace_p_hat: trace_sum / denom,
        flagged_solves: sorted.iter().map(|r| r.flagged_solves).sum(),
    }
}

#[derive(Debug, Clone)]
pub struct BatchResult {
    pub summary: MetricsSummary,
    pub records: Vec<ClosedLoopRecord>,
}

/// Runs `config.runs` independent trajectories (in parallel) and summarizes them.
pub fn run_batch<P, M>(plant: &P, model: &M, options: &SolveOptions, config: &SimConfig) -> Result<BatchResult>
where
    P: SystemModel + ?Sized,
    M: SystemModel + ?Sized,
{
    run_batch_indices(plant, model, options, config, 0..config.runs)
}

/// Like [`run_batch`] over an explicit set of run indices.
pub fn run_batch_indices<P, M>(
    plant: &P,
    model: &M,
    options: &SolveOptions,
    config: &SimConfig,
    indices: impl IntoIterator<Item = usize>,
) -> Result<BatchResult>
where
    P: SystemModel + ?Sized,
    M: SystemModel + ?Sized,
{
    config.validate()?;
    let indices: Vec<usize> = indices.into_iter().collect();
    let mut records = indices
        .into_par_iter()
        .map(|i| simulate_run(plant, model, options, config, i))
        .collect::<Result<Vec<_>>>()?;
    records.sort_by_key(|r| r.run_index);
    let summary = summarize(model, options.mode.name(), &records);
    Ok(BatchResult { summary, records })
}
