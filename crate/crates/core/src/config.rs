//! Experiment configuration files.
//!
//! A sectioned key–value file (TOML syntax). Unknown keys are rejected and
//! parse errors carry line and column. Example:
//!
//! ```toml
//! [model]
//! kind = "unicycle"
//! horizon_s = 3.0
//! intervals = 10
//!
//! [simulation]
//! x_hat0 = [3.0, 1.5, 3.141592653589793]
//! p_hat0_diag = [0.01, 0.01, 0.0025]
//! ```

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::estimation::BeliefState;
use crate::model::{JacobianSource, LinearModel, SystemModel, UnicycleModel, UnicycleParams};
use crate::simulator::SimConfig;
use crate::solver::{Mode, SolveOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Unicycle,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub horizon_s: f64,
    pub intervals: usize,
    pub rk4_substeps: usize,
    /// Held process noise covariance is `process_noise_std² · dt_s · I`.
    pub process_noise_std: f64,
    /// Output noise covariance before `σ_y` scaling is `measurement_noise_std² · I`.
    pub measurement_noise_std: f64,
    pub sigma_eps: f64,
    pub u_max: [f64; 2],
    pub control_weight: f64,
    pub violation_weight: f64,
    pub jacobians: JacobianChoice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum JacobianChoice {
    #[default]
    Analytic,
    FiniteDifference,
}

impl Default for ModelSection {
    fn default() -> Self {
        let p = UnicycleParams::default();
        Self {
            kind: ModelKind::Unicycle,
            horizon_s: p.horizon_s,
            intervals: p.intervals,
            rk4_substeps: p.rk4_substeps,
            process_noise_std: 0.02,
            measurement_noise_std: 0.01,
            sigma_eps: p.sigma_eps,
            u_max: p.u_max,
            control_weight: p.control_weight,
            violation_weight: p.violation_weight,
            jacobians: JacobianChoice::Analytic,
        }
    }
}

/// `x⁺ = A x + B u + Γ w`, `y = C x + D v`, cost `½xᵀQx + ½uᵀRu`, terminal `½xᵀQ_N x`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSection {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub q_terminal: Vec<Vec<f64>>,
    pub horizon_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub max_iterations: usize,
    pub tolerance: f64,
    pub fd_step: f64,
    pub armijo: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
    pub eps_sigma: f64,
    pub eps_k: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let o = SolveOptions::default();
        Self {
            max_iterations: o.max_iterations,
            tolerance: o.tolerance,
            fd_step: o.fd_step,
            armijo: o.armijo,
            backtrack: o.backtrack,
            max_backtracks: o.max_backtracks,
            eps_sigma: o.eps_sigma,
            eps_k: o.eps_k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub steps: usize,
    pub runs: usize,
    pub seed: u64,
    pub x_hat0: Vec<f64>,
    pub p_hat0_diag: Option<Vec<f64>>,
    pub p_hat0: Option<Vec<Vec<f64>>>,
    /// Mean of the true initial state; defaults to `x_hat0`.
    pub true_x0: Option<Vec<f64>>,
    /// Diagonal covariance of the true initial state; defaults to the belief covariance.
    pub true_p0_diag: Option<Vec<f64>>,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            steps: 20,
            runs: 20,
            seed: 0,
            x_hat0: vec![3.0, 1.5, std::f64::consts::PI],
            p_hat0_diag: None,
            p_hat0: None,
            true_x0: None,
            true_p0_diag: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub controllers: Vec<String>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            controllers: Mode::ALL.iter().map(|m| m.name().to_string()).collect(),
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub linear: Option<LinearSection>,
    pub solver: SolverSection,
    pub simulation: SimulationSection,
    pub experiment: ExperimentSection,
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config(format!("{what}: rows differ in length")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        match (self.model.kind, &self.linear) {
            (ModelKind::Linear, None) => return Err(Error::Config("model.kind = \"linear\" needs a [linear] section".into())),
            (ModelKind::Unicycle, Some(_)) => {
                return Err(Error::Config("[linear] section given but model.kind = \"unicycle\"".into()))
            }
            _ => {}
        }
        for name in &self.experiment.controllers {
            if Mode::parse(name).is_none() {
                return Err(Error::Config(format!("experiment.controllers: unknown controller {name:?}")));
            }
        }
        if self.simulation.p_hat0.is_some() && self.simulation.p_hat0_diag.is_some() {
            return Err(Error::Config("simulation: give either p_hat0 or p_hat0_diag, not both".into()));
        }
        if self.simulation.steps == 0 || self.simulation.runs == 0 {
            return Err(Error::Config("simulation.steps and simulation.runs must be at least 1".into()));
        }
        self.solve_options(Mode::OutputFeedback)
            .validate()
            .map_err(|e| Error::Config(format!("solver: {e}")))?;
        let model = self.build_model()?;
        let n_x = model.dims().n_x;
        let belief = self.initial_belief()?;
        if belief.mean.len() != n_x {
            return Err(Error::Config(format!(
                "simulation.x_hat0 has length {}, model state has {n_x}",
                belief.mean.len()
            )));
        }
        self.sim_config()?;
        Ok(())
    }

    pub fn unicycle_params(&self) -> UnicycleParams {
        let m = &self.model;
        let dt = m.horizon_s / m.intervals.max(1) as f64;
        UnicycleParams {
            horizon_s: m.horizon_s,
            intervals: m.intervals,
            rk4_substeps: m.rk4_substeps,
            process_noise_cov: DMatrix::identity(3, 3) * (m.process_noise_std.powi(2) * dt),
            measurement_noise_cov: DMatrix::identity(3, 3) * m.measurement_noise_std.powi(2),
            sigma_eps: m.sigma_eps,
            u_max: m.u_max,
            control_weight: m.control_weight,
            violation_weight: m.violation_weight,
            jacobians: match m.jacobians {
                JacobianChoice::Analytic => JacobianSource::Analytic,
                JacobianChoice::FiniteDifference => JacobianSource::FiniteDifference,
            },
        }
    }

    pub fn build_model(&self) -> Result<Box<dyn SystemModel>> {
        let wrap = |e: Error| Error::Config(format!("model: {e}"));
        match self.model.kind {
            ModelKind::Unicycle => Ok(Box::new(UnicycleModel::new(self.unicycle_params()).map_err(wrap)?)),
            ModelKind::Linear => {
                let l = self.linear.as_ref().expect("validated");
                let model = LinearModel::with_lq_cost(
                    matrix(&l.a, "linear.a")?,
                    matrix(&l.b, "linear.b")?,
                    matrix(&l.gamma, "linear.gamma")?,
                    matrix(&l.c, "linear.c")?,
                    matrix(&l.d, "linear.d")?,
                    l.horizon_steps,
                    &matrix(&l.q, "linear.q")?,
                    &matrix(&l.r, "linear.r")?,
                    &matrix(&l.q_terminal, "linear.q_terminal")?,
                )
                .map_err(wrap)?;
                Ok(Box::new(model))
            }
        }
    }

    pub fn solve_options(&self, mode: Mode) -> SolveOptions {
        let s = &self.solver;
        SolveOptions {
            max_iterations: s.max_iterations,
            tolerance: s.tolerance,
            fd_step: s.fd_step,
            armijo: s.armijo,
            backtrack: s.backtrack,
            max_backtracks: s.max_backtracks,
            eps_sigma: s.eps_sigma,
            eps_k: s.eps_k,
            mode,
            ..SolveOptions::default()
        }
    }

    fn covariance(&self, diag: &Option<Vec<f64>>, full: &Option<Vec<Vec<f64>>>, n: usize) -> Result<DMatrix<f64>> {
        let m = match (diag, full) {
            (Some(d), _) => DMatrix::from_diagonal(&DVector::from_column_slice(d)),
            (None, Some(f)) => matrix(f, "simulation.p_hat0")?,
            (None, None) => DMatrix::zeros(n, n),
        };
        if m.shape() != (n, n) {
            return Err(Error::Config(format!("simulation: covariance has shape {:?}, expected {n}×{n}", m.shape())));
        }
        Ok(m)
    }

    pub fn initial_belief(&self) -> Result<BeliefState> {
        let s = &self.simulation;
        let mean = DVector::from_column_slice(&s.x_hat0);
        let cov = self.covariance(&s.p_hat0_diag, &s.p_hat0, mean.len())?;
        BeliefState::new(mean, cov).map_err(|e| Error::Config(format!("simulation: {e}")))
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        let s = &self.simulation;
        let belief = self.initial_belief()?;
        let true_initial = if s.true_x0.is_some() || s.true_p0_diag.is_some() {
            let mean = s
                .true_x0
                .as_ref()
                .map(|v| DVector::from_column_slice(v))
                .unwrap_or_else(|| belief.mean.clone());
            let cov = match &s.true_p0_diag {
                Some(d) => self.covariance(&Some(d.clone()), &None, mean.len())?,
                None => belief.covariance.clone(),
            };
            Some(BeliefState::new(mean, cov).map_err(|e| Error::Config(format!("simulation: {e}")))?)
        } else {
            None
        };
        Ok(SimConfig {
            steps: s.steps,
            runs: s.runs,
            master_seed: s.seed,
            initial_belief: belief,
            true_initial,
        })
    }

    pub fn controllers(&self) -> Vec<Mode> {
        self.experiment
            .controllers
            .iter()
            .filter_map(|c| Mode::parse(c))
            .collect()
    }
}
