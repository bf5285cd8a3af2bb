//! Output-feedback stochastic MPC that keeps the dual control effect.
//!
//! The controller predicts a nominal trajectory, linearizes the system along
//! it, and propagates the joint covariance of the state deviation and the
//! Kalman-filter estimation error under estimate feedback
//! `u_k = ū_k + K_k (x̂_k − x̄_k)`. Because the linearization (and therefore the
//! predicted information) depends on `ū`, the optimizer can trade progress
//! against future measurement quality. Quadratic costs and linear violation
//! penalties are integrated exactly under the resulting Gaussian.
//!
//! Module map:
//! - [`model`]: system/cost/constraint interfaces, RK4, the unicycle example
//! - [`uncertainty`]: rollout, linearization, Kalman recursion, covariance propagation
//! - [`objective`]: expected costs and penalties
//! - [`solver`]: projected quasi-Newton single shooting over `(ū, K)`
//! - [`estimation`]: EKF for the closed loop
//! - [`controller`]: receding-horizon wrapper
//! - [`simulator`]: seeded closed-loop Monte Carlo
//! - [`config`], [`cli`]: experiment files and the command-line driver

pub mod cli;
pub mod config;
pub mod controller;
pub mod error;
pub mod estimation;
pub mod linalg;
pub mod model;
pub mod objective;
pub mod rng;
pub mod simulator;
pub mod solver;
pub mod uncertainty;

pub use controller::{shift_warm_start, Controller, StepDiagnostics};
pub use error::{Error, Result};
pub use estimation::{ekf_predict, ekf_update, BeliefState};
pub use model::{LinearModel, SystemModel, UnicycleModel, UnicycleParams};
pub use objective::{expected_quadratic, expected_relu, total_objective, ObjectiveBreakdown, ObjectiveOptions};
pub use simulator::{run_batch, simulate_run, ClosedLoopRecord, MetricsSummary, SimConfig};
pub use solver::{solve, Mode, SolveOptions, SolveResult, SolveStatus};
pub use uncertainty::{AugmentedCovariance, NominalTrajectory, Policy, StageLinearization};
