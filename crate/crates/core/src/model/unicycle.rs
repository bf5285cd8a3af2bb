//! Nonholonomic robot with position-dependent measurement noise.
//!
//! State `(r^x, r^y, θ)`, control `(v, ω)`. The measurement is the full state
//! corrupted by noise whose standard deviation grows roughly linearly with
//! `|r^y|`, so moving toward the `r^x`-axis buys information.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector2, Vector3};

use super::rk4::{rk4_step, rk4_step_with_sensitivities, ContinuousDynamics, DEFAULT_SUBSTEPS};
use super::{
    fd, AffineConstraint, ConstraintSet, Dims, DynamicsJacobians, FdStep, InputBox, JacobianSource, OutputJacobians,
    QuadraticCost, SystemModel,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct UnicycleParams {
    /// Continuous prediction horizon `T`.
    pub horizon_s: f64,
    /// Number of intervals `N`.
    pub intervals: usize,
    pub rk4_substeps: usize,
    /// Covariance of the held process noise `w_k` (3×3).
    pub process_noise_cov: DMatrix<f64>,
    /// Covariance of the standardized output noise `v_k` before `σ_y` scaling (3×3).
    pub measurement_noise_cov: DMatrix<f64>,
    /// Smoothing constant `ε` inside `σ_y`.
    pub sigma_eps: f64,
    pub u_max: [f64; 2],
    /// `ε_u` in `r^x + ε_u ‖u‖²`.
    pub control_weight: f64,
    /// Violation weight `ρ` shared by all constraints.
    pub violation_weight: f64,
    pub jacobians: JacobianSource,
}

impl Default for UnicycleParams {
    fn default() -> Self {
        let horizon_s = 3.0;
        let intervals = 10;
        let dt = horizon_s / intervals as f64;
        Self {
            horizon_s,
            intervals,
            rk4_substeps: DEFAULT_SUBSTEPS,
            process_noise_cov: DMatrix::identity(3, 3) * (0.02f64.powi(2) * dt),
            measurement_noise_cov: DMatrix::identity(3, 3) * 0.01f64.powi(2),
            sigma_eps: 1e-2,
            u_max: [2.0, 2.0],
            control_weight: 1e-6,
            violation_weight: 1e3,
            jacobians: JacobianSource::Analytic,
        }
    }
}

/// `σ_y(x) = 1 + 10 (√((r^y)² + ε²) − ε)`.
pub fn unicycle_sigma_y(x: &[f64], eps: f64) -> f64 {
    let ry = x[1];
    1.0 + 10.0 * ((ry * ry + eps * eps).sqrt() - eps)
}

/// `ẋ = (v cos θ, v sin θ, ω) + L_w w`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnicycleOde {
    pub process_factor: Matrix3<f64>,
}

impl ContinuousDynamics<3, 2, 3> for UnicycleOde {
    fn rhs(&self, x: &Vector3<f64>, u: &Vector2<f64>, w: &Vector3<f64>) -> Vector3<f64> {
        let (s, c) = x[2].sin_cos();
        Vector3::new(u[0] * c, u[0] * s, u[1]) + self.process_factor * w
    }

    fn rhs_jacobians(
        &self,
        x: &Vector3<f64>,
        u: &Vector2<f64>,
        _w: &Vector3<f64>,
    ) -> (Matrix3<f64>, SMatrix<f64, 3, 2>, Matrix3<f64>) {
        let (s, c) = x[2].sin_cos();
        let fx = Matrix3::new(0.0, 0.0, -u[0] * s, 0.0, 0.0, u[0] * c, 0.0, 0.0, 0.0);
        let fu = SMatrix::<f64, 3, 2>::new(c, 0.0, s, 0.0, 0.0, 1.0);
        (fx, fu, self.process_factor)
    }
}

#[derive(Debug, Clone)]
pub struct UnicycleModel {
    params: UnicycleParams,
    dt: f64,
    ode: UnicycleOde,
    measurement_factor: Matrix3<f64>,
    stage_cost: QuadraticCost,
    terminal_cost: QuadraticCost,
    constraints: ConstraintSet,
}

fn lower_factor(m: &DMatrix<f64>, what: &str) -> Result<Matrix3<f64>> {
    if m.shape() != (3, 3) {
        return Err(Error::Dimension(format!("{what} must be 3×3, got {:?}", m.shape())));
    }
    let l = crate::linalg::psd_factor(m)
        .ok_or_else(|| Error::RejectedInput(format!("{what} is not positive semidefinite")))?;
    Ok(Matrix3::from_iterator(l.iter().copied()))
}

impl UnicycleModel {
    pub fn new(params: UnicycleParams) -> Result<Self> {
        if params.horizon_s.is_nan() || params.horizon_s <= 0.0 || params.intervals == 0 {
            return Err(Error::RejectedInput("horizon and interval count must be positive".into()));
        }
        if params.sigma_eps.is_nan() || params.sigma_eps <= 0.0 {
            return Err(Error::RejectedInput("σ_y smoothing constant must be positive".into()));
        }
        if params.u_max.iter().any(|b| b.is_nan() || *b <= 0.0) {
            return Err(Error::RejectedInput("control bounds must be positive".into()));
        }
        if params.control_weight < 0.0 {
            return Err(Error::RejectedInput("control weight must be nonnegative".into()));
        }
        let dt = params.horizon_s / params.intervals as f64;
        let ode = UnicycleOde {
            process_factor: lower_factor(&params.process_noise_cov, "process noise covariance")?,
        };
        let measurement_factor = lower_factor(&params.measurement_noise_cov, "measurement noise covariance")?;

        // l_k = r^x + ε_u‖u‖², l_N = r^x
        let mut hess = DMatrix::zeros(5, 5);
        hess[(3, 3)] = 2.0 * params.control_weight;
        hess[(4, 4)] = 2.0 * params.control_weight;
        let stage_cost = QuadraticCost::new(hess, DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0, 0.0]), 0.0)?;
        let terminal_cost = QuadraticCost::new(DMatrix::zeros(3, 3), DVector::from_vec(vec![1.0, 0.0, 0.0]), 0.0)?;

        // 0 ≤ r^x on x_1..x_N, and −u_max ≤ u ≤ u_max. The x_0 and u_0 entries are
        // deterministic, so those constraints start at stage 1.
        let rho = params.violation_weight;
        let mut constraints = ConstraintSet::new();
        constraints.push_stage(
            "rx_nonnegative",
            Arc::new(AffineConstraint::new(DVector::from_vec(vec![-1.0, 0.0, 0.0, 0.0, 0.0]), 0.0)),
            rho,
            1,
        )?;
        for (j, name) in ["v", "omega"].iter().enumerate() {
            let mut upper = DVector::zeros(5);
            upper[3 + j] = 1.0;
            constraints.push_stage(
                format!("{name}_upper"),
                Arc::new(AffineConstraint::new(upper.clone(), -params.u_max[j])),
                rho,
                1,
            )?;
            constraints.push_stage(
                format!("{name}_lower"),
                Arc::new(AffineConstraint::new(-upper, -params.u_max[j])),
                rho,
                1,
            )?;
        }
        constraints.push_terminal(
            "rx_nonnegative",
            Arc::new(AffineConstraint::new(DVector::from_vec(vec![-1.0, 0.0, 0.0]), 0.0)),
            rho,
        )?;
        constraints.set_input_box(InputBox::symmetric(&DVector::from_vec(params.u_max.to_vec())));

        Ok(Self {
            params,
            dt,
            ode,
            measurement_factor,
            stage_cost,
            terminal_cost,
            constraints,
        })
    }

    pub fn params(&self) -> &UnicycleParams {
        &self.params
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn ode(&self) -> &UnicycleOde {
        &self.ode
    }

    pub fn sigma_y(&self, x: &DVector<f64>) -> f64 {
        unicycle_sigma_y(x.as_slice(), self.params.sigma_eps)
    }
}

fn to3(v: &DVector<f64>) -> Result<Vector3<f64>> {
    if v.len() != 3 {
        return Err(Error::Dimension(format!("expected a 3-vector, got length {}", v.len())));
    }
    Ok(Vector3::new(v[0], v[1], v[2]))
}

fn to2(v: &DVector<f64>) -> Result<Vector2<f64>> {
    if v.len() != 2 {
        return Err(Error::Dimension(format!("expected a 2-vector, got length {}", v.len())));
    }
    Ok(Vector2::new(v[0], v[1]))
}

fn dyn_from<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}

impl SystemModel for UnicycleModel {
    fn dims(&self) -> Dims {
        Dims {
            n_x: 3,
            n_u: 2,
            n_w: 3,
            n_v: 3,
            n_y: 3,
        }
    }

    fn horizon(&self) -> usize {
        self.params.intervals
    }

    fn dynamics(&self, _stage: usize, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        let next = rk4_step(&self.ode, &to3(x)?, &to2(u)?, &to3(w)?, self.dt, self.params.rk4_substeps)?;
        Ok(DVector::from_column_slice(next.as_slice()))
    }

    fn output(&self, _stage: usize, x: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        let xs = to3(x)?;
        let noise = self.measurement_factor * to3(v)? * self.sigma_y(x);
        Ok(DVector::from_column_slice((xs + noise).as_slice()))
    }

    fn dynamics_jacobians(&self, stage: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<DynamicsJacobians> {
        match self.params.jacobians {
            JacobianSource::FiniteDifference => fd::fd_dynamics_jacobians(self, stage, x, u, FdStep::default()),
            JacobianSource::Analytic => {
                let s = rk4_step_with_sensitivities(
                    &self.ode,
                    &to3(x)?,
                    &to2(u)?,
                    &Vector3::zeros(),
                    self.dt,
                    self.params.rk4_substeps,
                )?;
                Ok(DynamicsJacobians {
                    a: dyn_from(&s.dx),
                    b: dyn_from(&s.du),
                    gamma: dyn_from(&s.dw),
                })
            }
        }
    }

    fn output_jacobians(&self, stage: usize, x: &DVector<f64>) -> Result<OutputJacobians> {
        match self.params.jacobians {
            JacobianSource::FiniteDifference => fd::fd_output_jacobians(self, stage, x, FdStep::default()),
            // at v = 0 the σ_y(x)·L_v·v term has no x-derivative
            JacobianSource::Analytic => Ok(OutputJacobians {
                c: DMatrix::identity(3, 3),
                d: dyn_from(&self.measurement_factor) * self.sigma_y(x),
            }),
        }
    }

    fn stage_cost(&self, _stage: usize) -> &QuadraticCost {
        &self.stage_cost
    }

    fn terminal_cost(&self) -> &QuadraticCost {
        &self.terminal_cost
    }

    fn constraints(&self) -> &ConstraintSet {
        &self.constraints
    }
}
