use nalgebra::{DMatrix, DVector};

use super::{ConstraintSet, Dims, DynamicsJacobians, OutputJacobians, QuadraticCost, SystemModel};
use crate::error::{Error, Result};

/// Time-invariant linear system `x⁺ = A x + B u + Γ w`, `y = C x + D v`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    horizon: usize,
    stage_cost: QuadraticCost,
    terminal_cost: QuadraticCost,
    constraints: ConstraintSet,
}

impl LinearModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        gamma: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        horizon: usize,
        stage_cost: QuadraticCost,
        terminal_cost: QuadraticCost,
    ) -> Result<Self> {
        let n_x = a.nrows();
        let ok = a.ncols() == n_x
            && b.nrows() == n_x
            && gamma.nrows() == n_x
            && c.ncols() == n_x
            && d.nrows() == c.nrows()
            && stage_cost.dim() == n_x + b.ncols()
            && terminal_cost.dim() == n_x;
        if !ok {
            return Err(Error::Dimension("inconsistent linear model matrices".into()));
        }
        Ok(Self {
            a,
            b,
            gamma,
            c,
            d,
            horizon,
            stage_cost,
            terminal_cost,
            constraints: ConstraintSet::new(),
        })
    }

    /// `½xᵀQx + ½uᵀRu` stage cost and `½xᵀQ_N x` terminal cost.
    #[allow(clippy::too_many_arguments)]
    pub fn with_lq_cost(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        gamma: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        horizon: usize,
        q: &DMatrix<f64>,
        r: &DMatrix<f64>,
        q_terminal: &DMatrix<f64>,
    ) -> Result<Self> {
        let (nx, nu) = (q.nrows(), r.nrows());
        let mut h = DMatrix::zeros(nx + nu, nx + nu);
        h.view_mut((0, 0), (nx, nx)).copy_from(q);
        h.view_mut((nx, nx), (nu, nu)).copy_from(r);
        let stage = QuadraticCost::new(h, DVector::zeros(nx + nu), 0.0)?;
        let terminal = QuadraticCost::new(q_terminal.clone(), DVector::zeros(nx), 0.0)?;
        Self::new(a, b, gamma, c, d, horizon, stage, terminal)
    }

    pub fn with_constraints(mut self, constraints: ConstraintSet) -> Self {
        self.constraints = constraints;
        self
    }
}

impl SystemModel for LinearModel {
    fn dims(&self) -> Dims {
        Dims {
            n_x: self.a.nrows(),
            n_u: self.b.ncols(),
            n_w: self.gamma.ncols(),
            n_v: self.d.ncols(),
            n_y: self.c.nrows(),
        }
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn dynamics(&self, _stage: usize, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        let dims = self.dims();
        if x.len() != dims.n_x || u.len() != dims.n_u || w.len() != dims.n_w {
            return Err(Error::Dimension("linear model dynamics arguments".into()));
        }
        Ok(&self.a * x + &self.b * u + &self.gamma * w)
    }

    fn output(&self, _stage: usize, x: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.c * x + &self.d * v)
    }

    fn dynamics_jacobians(&self, _stage: usize, _x: &DVector<f64>, _u: &DVector<f64>) -> Result<DynamicsJacobians> {
        Ok(DynamicsJacobians {
            a: self.a.clone(),
            b: self.b.clone(),
            gamma: self.gamma.clone(),
        })
    }

    fn output_jacobians(&self, _stage: usize, _x: &DVector<f64>) -> Result<OutputJacobians> {
        Ok(OutputJacobians {
            c: self.c.clone(),
            d: self.d.clone(),
        })
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
