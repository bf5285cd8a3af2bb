//! Central finite-difference Jacobians.

use nalgebra::{DMatrix, DVector};

use super::{DynamicsJacobians, OutputJacobians, SystemModel};
use crate::error::{Error, Result};

/// Column step policy: column `j` is perturbed by `h·(1 + |x_j|)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdStep {
    pub h: f64,
}

impl Default for FdStep {
    fn default() -> Self {
        Self { h: 1e-6 }
    }
}

impl FdStep {
    pub fn for_value(&self, x: f64) -> f64 {
        self.h * (1.0 + x.abs())
    }
}

/// Central-difference Jacobian of `f` at `at`.
pub fn fd_jacobian<F>(f: F, at: &DVector<f64>, step: FdStep) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = at.len();
    let f0 = f(at);
    if !f0.iter().all(|v| v.is_finite()) {
        return Err(Error::RejectedInput("function is not finite at the evaluation point".into()));
    }
    let m = f0.len();
    let mut jac = DMatrix::zeros(m, n);
    let mut probe = at.clone();
    for j in 0..n {
        let h = step.for_value(at[j]);
        probe[j] = at[j] + h;
        let fp = f(&probe);
        probe[j] = at[j] - h;
        let fm = f(&probe);
        probe[j] = at[j];
        if fp.len() != m || fm.len() != m {
            return Err(Error::Dimension(format!("function output length changed at column {j}")));
        }
        for i in 0..m {
            let d = (fp[i] - fm[i]) / (2.0 * h);
            if !d.is_finite() {
                return Err(Error::NonFiniteColumn { column: j });
            }
            jac[(i, j)] = d;
        }
    }
    Ok(jac)
}

pub fn fd_dynamics_jacobians<M: SystemModel + ?Sized>(
    model: &M,
    stage: usize,
    x: &DVector<f64>,
    u: &DVector<f64>,
    step: FdStep,
) -> Result<DynamicsJacobians> {
    let dims = model.dims();
    let w0 = DVector::zeros(dims.n_w);
    let eval = |x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>| {
        model
            .dynamics(stage, x, u, w)
            .unwrap_or_else(|_| DVector::from_element(dims.n_x, f64::NAN))
    };
    let a = fd_jacobian(|xp| eval(xp, u, &w0), x, step)?;
    let b = fd_jacobian(|up| eval(x, up, &w0), u, step)?;
    let gamma = fd_jacobian(|wp| eval(x, u, wp), &w0, step)?;
    Ok(DynamicsJacobians { a, b, gamma })
}

pub fn fd_output_jacobians<M: SystemModel + ?Sized>(
    model: &M,
    stage: usize,
    x: &DVector<f64>,
    step: FdStep,
) -> Result<OutputJacobians> {
    let dims = model.dims();
    let v0 = DVector::zeros(dims.n_v);
    let eval = |x: &DVector<f64>, v: &DVector<f64>| {
        model
            .output(stage, x, v)
            .unwrap_or_else(|_| DVector::from_element(dims.n_y, f64::NAN))
    };
    let c = fd_jacobian(|xp| eval(xp, &v0), x, step)?;
    let d = fd_jacobian(|vp| eval(x, vp), &v0, step)?;
    Ok(OutputJacobians { c, d })
}
