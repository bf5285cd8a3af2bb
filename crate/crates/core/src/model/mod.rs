//! System, cost, and constraint interfaces plus the concrete models.
//!
//! Disturbances entering [`SystemModel::dynamics`] and [`SystemModel::output`]
//! are standardized: every model shapes unit-covariance `w` and `v` internally
//! (e.g. through Cholesky factors of its noise covariances), so downstream code
//! always treats them as `N(0, I)`.

mod constraints;
mod cost;
pub mod fd;
mod linear;
pub mod rk4;
mod unicycle;

use nalgebra::{DMatrix, DVector};

pub use constraints::{
    AffineConstraint, ConstraintFunction, ConstraintSet, FnConstraint, InputBox, PenalizedConstraint,
};
pub use cost::QuadraticCost;
pub use fd::{fd_jacobian, FdStep};
pub use linear::LinearModel;
pub use unicycle::{unicycle_sigma_y, UnicycleModel, UnicycleOde, UnicycleParams};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n_x: usize,
    pub n_u: usize,
    pub n_w: usize,
    pub n_v: usize,
    pub n_y: usize,
}

/// `∂f/∂x`, `∂f/∂u`, `∂f/∂w` at a point with `w = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsJacobians {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
}

/// `∂g/∂x`, `∂g/∂v` at a point with `v = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputJacobians {
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum JacobianSource {
    #[default]
    Analytic,
    FiniteDifference,
}

/// A stage-indexed nonlinear discrete-time system
/// `x⁺ = f_k(x, u, w)`, `y = g_k(x, v)` with quadratic costs and penalized constraints.
///
/// Implementations must be immutable after construction; every method is a
/// pure function of its arguments.
pub trait SystemModel: Send + Sync {
    fn dims(&self) -> Dims;

    /// Number of stages `N` of the prediction horizon.
    fn horizon(&self) -> usize;

    fn dynamics(&self, stage: usize, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>>;

    fn output(&self, stage: usize, x: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>>;

    /// Jacobians of `f_k` at `(x, u, 0)`. Defaults to central finite differences.
    fn dynamics_jacobians(&self, stage: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<DynamicsJacobians> {
        fd::fd_dynamics_jacobians(self, stage, x, u, FdStep::default())
    }

    /// Jacobians of `g_k` at `(x, 0)`. Defaults to central finite differences.
    fn output_jacobians(&self, stage: usize, x: &DVector<f64>) -> Result<OutputJacobians> {
        fd::fd_output_jacobians(self, stage, x, FdStep::default())
    }

    /// Cost `l_k(x, u)` over `z = (x, u)`, for `k < N`.
    fn stage_cost(&self, stage: usize) -> &QuadraticCost;

    /// Terminal cost `l_N(x)`.
    fn terminal_cost(&self) -> &QuadraticCost;

    fn constraints(&self) -> &ConstraintSet;
}

/// Checks that Jacobians returned by a provider have the shapes implied by `dims`.
pub(crate) fn check_dynamics_jacobians(dims: Dims, j: &DynamicsJacobians) -> Result<()> {
    let ok = j.a.shape() == (dims.n_x, dims.n_x)
        && j.b.shape() == (dims.n_x, dims.n_u)
        && j.gamma.shape() == (dims.n_x, dims.n_w);
    if ok {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "dynamics jacobians have shapes {:?}, {:?}, {:?}",
            j.a.shape(),
            j.b.shape(),
            j.gamma.shape()
        )))
    }
}

pub(crate) fn check_output_jacobians(dims: Dims, j: &OutputJacobians) -> Result<()> {
    if j.c.shape() == (dims.n_y, dims.n_x) && j.d.shape() == (dims.n_y, dims.n_v) {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "output jacobians have shapes {:?}, {:?}",
            j.c.shape(),
            j.d.shape()
        )))
    }
}
