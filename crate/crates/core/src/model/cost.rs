use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::min_eigenvalue;

/// Convex quadratic `l(z) = ½ zᵀ H z + gᵀ z + c` with constant Hessian `H ⪰ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost {
    hessian: DMatrix<f64>,
    gradient: DVector<f64>,
    constant: f64,
}

impl QuadraticCost {
    pub fn new(hessian: DMatrix<f64>, gradient: DVector<f64>, constant: f64) -> Result<Self> {
        let n = gradient.len();
        if hessian.shape() != (n, n) {
            return Err(Error::Dimension(format!(
                "cost hessian {:?} does not match gradient length {n}",
                hessian.shape()
            )));
        }
        let asym = (&hessian - hessian.transpose()).abs().max();
        if asym > 1e-12 * (1.0 + hessian.abs().max()) {
            return Err(Error::RejectedInput("cost hessian is not symmetric".into()));
        }
        if n > 0 && min_eigenvalue(&hessian) < -1e-10 {
            return Err(Error::RejectedInput("cost hessian is not positive semidefinite".into()));
        }
        Ok(Self {
            hessian,
            gradient,
            constant,
        })
    }

    pub fn zero(n: usize) -> Self {
        Self {
            hessian: DMatrix::zeros(n, n),
            gradient: DVector::zeros(n),
            constant: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.gradient.len()
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    pub fn gradient(&self) -> &DVector<f64> {
        &self.gradient
    }

    pub fn constant(&self) -> f64 {
        self.constant
    }

    pub fn eval(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.hessian * z)) + self.gradient.dot(z) + self.constant
    }
}
