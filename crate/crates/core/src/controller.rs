//! Receding-horizon controller: solve from the current belief, apply `ū_0`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::BeliefState;
use crate::model::SystemModel;
use crate::solver::{solve, Mode, SolveOptions, SolveResult, SolveStatus};
use crate::uncertainty::Policy;

/// Per-step solver diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub iterations: usize,
    pub status: SolveStatus,
    pub objective: f64,
    pub stationarity: f64,
    pub warm_started: bool,
    /// Set when the solver did not converge or failed outright.
    pub flagged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Controller {
    options: SolveOptions,
    previous: Option<SolveResult>,
    log: Vec<StepDiagnostics>,
}

/// Shift by one stage and duplicate the tail; the shifted first gain is zero.
pub fn shift_warm_start(prev: &Policy) -> Policy {
    let n = prev.horizon();
    if n == 0 {
        return prev.clone();
    }
    let mut controls: Vec<DVector<f64>> = prev.controls()[1..].to_vec();
    controls.push(prev.controls()[n - 1].clone());
    let gains = prev.gains();
    // new K_k = old K_{k+1} for k = 1 … N−2, new K_{N−1} = old K_{N−1}
    let feedback = (1..n).map(|k| gains[(k + 1).min(n - 1)].clone()).collect();
    Policy::new(controls, feedback).expect("shifted policy keeps its shapes")
}

impl Controller {
    pub fn new(options: SolveOptions) -> Self {
        Self {
            options,
            previous: None,
            log: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.options.mode
    }

    pub fn options(&self) -> &SolveOptions {
        &self.options
    }

    pub fn diagnostics(&self) -> &[StepDiagnostics] {
        &self.log
    }

    pub fn last_solution(&self) -> Option<&SolveResult> {
        self.previous.as_ref()
    }

    pub fn reset(&mut self) {
        self.previous = None;
        self.log.clear();
    }

    fn warm_start<M: SystemModel + ?Sized>(&self, model: &M) -> Option<Policy> {
        let prev = self.previous.as_ref()?;
        let dims = model.dims();
        let fits = prev.policy.horizon() == model.horizon()
            && prev.policy.controls().iter().all(|u| u.len() == dims.n_u)
            && prev.policy.gains().iter().all(|k| k.shape() == (dims.n_u, dims.n_x));
        fits.then(|| shift_warm_start(&prev.policy))
    }

    /// Solves the OCP from `belief` and returns the first nominal control.
    ///
    /// Solver trouble is reported through the diagnostics rather than as an
    /// error: the best control found so far is applied, or the shifted warm
    /// start (zero when cold) if the solve failed outright.
    pub fn step<M: SystemModel + ?Sized>(&mut self, model: &M, belief: &BeliefState) -> Result<(DVector<f64>, StepDiagnostics)> {
        if !belief.is_finite() {
            return Err(Error::RejectedInput("belief contains non-finite entries".into()));
        }
        let warm = self.warm_start(model);
        let warm_started = warm.is_some();
        let dims = model.dims();
        let (u, diag) = match solve(model, &belief.mean, &belief.covariance, &self.options, warm.as_ref()) {
            Ok(result) => {
                let diag = StepDiagnostics {
                    iterations: result.iterations,
                    status: result.status,
                    objective: result.objective.total,
                    stationarity: result.stationarity,
                    warm_started,
                    flagged: !result.status.is_converged(),
                    error: None,
                };
                let u = result
                    .policy
                    .controls()
                    .first()
                    .cloned()
                    .unwrap_or_else(|| DVector::zeros(dims.n_u));
                self.previous = Some(result);
                (u, diag)
            }
            Err(e) => {
                let u = warm
                    .as_ref()
                    .and_then(|p| p.controls().first().cloned())
                    .unwrap_or_else(|| DVector::zeros(dims.n_u));
                self.previous = None;
                let diag = StepDiagnostics {
                    iterations: 0,
                    status: SolveStatus::LineSearchFailure,
                    objective: f64::NAN,
                    stationarity: f64::NAN,
                    warm_started,
                    flagged: true,
                    error: Some(e.to_string()),
                };
                (u, diag)
            }
        };
        let mut u = u;
        if let Some(b) = model.constraints().input_box() {
            b.clamp(&mut u);
        }
        self.log.push(diag.clone());
        Ok((u, diag))
    }
}
