//! Extended Kalman filter used inside the closed loop.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, all_finite_vec, symmetrize};
use crate::model::SystemModel;
use crate::uncertainty::kalman_update;

/// Estimate mean and covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefState {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl BeliefState {
    pub fn new(mean: DVector<f64>, mut covariance: DMatrix<f64>) -> Result<Self> {
        if covariance.shape() != (mean.len(), mean.len()) {
            return Err(Error::Dimension("belief covariance does not match mean".into()));
        }
        symmetrize(&mut covariance);
        Ok(Self { mean, covariance })
    }

    pub fn is_finite(&self) -> bool {
        all_finite_vec(&self.mean) && all_finite(&self.covariance)
    }
}

/// `x̂⁺ = f(x̂, u, 0)`, `P̂⁺ = A P̂ Aᵀ + Γ Γᵀ` with Jacobians at `(x̂, u, 0)`.
pub fn ekf_predict<M: SystemModel + ?Sized>(
    model: &M,
    belief: &BeliefState,
    u: &DVector<f64>,
    stage: usize,
) -> Result<BeliefState> {
    let dims = model.dims();
    let mean = model.dynamics(stage, &belief.mean, u, &DVector::zeros(dims.n_w))?;
    let jac = model.dynamics_jacobians(stage, &belief.mean, u)?;
    let mut covariance = &jac.a * &belief.covariance * jac.a.transpose() + &jac.gamma * jac.gamma.transpose();
    symmetrize(&mut covariance);
    let out = BeliefState { mean, covariance };
    if !out.is_finite() {
        return Err(Error::NonFinite {
            stage,
            what: "EKF prediction".into(),
        });
    }
    Ok(out)
}

/// Measurement update with `C`, `D` evaluated at `(x̂, 0)`.
pub fn ekf_update<M: SystemModel + ?Sized>(
    model: &M,
    belief: &BeliefState,
    y: &DVector<f64>,
    stage: usize,
) -> Result<BeliefState> {
    let dims = model.dims();
    if y.len() != dims.n_y {
        return Err(Error::Dimension(format!("measurement has length {}, expected {}", y.len(), dims.n_y)));
    }
    let jac = model.output_jacobians(stage, &belief.mean)?;
    let predicted = model.output(stage, &belief.mean, &DVector::zeros(dims.n_v))?;
    let (gain, covariance) = kalman_update(&belief.covariance, &jac.c, &jac.d, stage)?;
    let mean = &belief.mean + &gain * (y - predicted);
    let out = BeliefState { mean, covariance };
    if !out.is_finite() {
        return Err(Error::NonFinite {
            stage,
            what: "EKF update".into(),
        });
    }
    Ok(out)
}
