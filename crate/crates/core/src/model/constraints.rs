use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;

use super::fd::{fd_jacobian, FdStep};
use crate::error::{Error, Result};

/// A scalar constraint function `h(x, u) ≤ 0` with its gradient over `z = (x, u)`.
///
/// Terminal constraints are evaluated with an empty `u`.
pub trait ConstraintFunction: Send + Sync {
    fn value(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64;

    fn gradient(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
}

/// `h(z) = aᵀ z + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineConstraint {
    pub coefficients: DVector<f64>,
    pub offset: f64,
}

impl AffineConstraint {
    pub fn new(coefficients: DVector<f64>, offset: f64) -> Self {
        Self { coefficients, offset }
    }
}

impl ConstraintFunction for AffineConstraint {
    fn value(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let nx = x.len();
        let mut acc = self.offset;
        for (i, xi) in x.iter().enumerate() {
            acc += self.coefficients[i] * xi;
        }
        for (j, uj) in u.iter().enumerate() {
            acc += self.coefficients[nx + j] * uj;
        }
        acc
    }

    fn gradient(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        self.coefficients.clone()
    }
}

type ScalarFn = dyn Fn(&DVector<f64>, &DVector<f64>) -> f64 + Send + Sync;

/// A constraint given by a closure, differentiated by central finite differences.
#[derive(Clone)]
pub struct FnConstraint {
    f: Arc<ScalarFn>,
    step: FdStep,
}

impl FnConstraint {
    pub fn new(f: impl Fn(&DVector<f64>, &DVector<f64>) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            f: Arc::new(f),
            step: FdStep::default(),
        }
    }
}

impl ConstraintFunction for FnConstraint {
    fn value(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        (self.f)(x, u)
    }

    fn gradient(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let nx = x.len();
        let z = DVector::from_iterator(nx + u.len(), x.iter().chain(u.iter()).copied());
        let f = &self.f;
        let jac = fd_jacobian(
            |z: &DVector<f64>| {
                let xs = z.rows(0, nx).into_owned();
                let us = z.rows(nx, z.len() - nx).into_owned();
                DVector::from_element(1, f(&xs, &us))
            },
            &z,
            self.step,
        );
        match jac {
            Ok(j) => j.row(0).transpose(),
            Err(_) => DVector::from_element(nx + u.len(), f64::NAN),
        }
    }
}

/// A constraint function together with its violation weight `ρ` and the
/// first stage index at which it is enforced.
#[derive(Clone)]
pub struct PenalizedConstraint {
    pub name: String,
    pub function: Arc<dyn ConstraintFunction>,
    pub weight: f64,
    pub first_stage: usize,
}

impl fmt::Debug for PenalizedConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PenalizedConstraint")
            .field("name", &self.name)
            .field("weight", &self.weight)
            .field("first_stage", &self.first_stage)
            .finish()
    }
}

impl PenalizedConstraint {
    pub fn applies_at(&self, stage: usize) -> bool {
        stage >= self.first_stage
    }
}

/// Hard lower/upper bounds on the nominal controls.
#[derive(Debug, Clone, PartialEq)]
pub struct InputBox {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl InputBox {
    pub fn symmetric(bound: &DVector<f64>) -> Self {
        Self {
            lower: -bound.clone(),
            upper: bound.clone(),
        }
    }

    pub fn contains(&self, u: &DVector<f64>) -> bool {
        u.iter()
            .zip(self.lower.iter().zip(self.upper.iter()))
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    pub fn clamp(&self, u: &mut DVector<f64>) {
        for (i, v) in u.iter_mut().enumerate() {
            *v = v.clamp(self.lower[i], self.upper[i]);
        }
    }
}

/// Stage constraints `h_k(x, u)`, terminal constraints `h_N(x)`, and
/// optional hard nominal input bounds.
#[derive(Debug, Clone, Default)]
pub struct ConstraintSet {
    stage: Vec<PenalizedConstraint>,
    terminal: Vec<PenalizedConstraint>,
    input_box: Option<InputBox>,
}

impl ConstraintSet {
    pub fn new() -> Self {
        Self::default()
    }

    fn check_weight(weight: f64) -> Result<()> {
        if weight > 0.0 && weight.is_finite() {
            Ok(())
        } else {
            Err(Error::RejectedInput(format!("penalty weight must be positive, got {weight}")))
        }
    }

    pub fn push_stage(
        &mut self,
        name: impl Into<String>,
        function: Arc<dyn ConstraintFunction>,
        weight: f64,
        first_stage: usize,
    ) -> Result<()> {
        Self::check_weight(weight)?;
        self.stage.push(PenalizedConstraint {
            name: name.into(),
            function,
            weight,
            first_stage,
        });
        Ok(())
    }

    pub fn push_terminal(&mut self, name: impl Into<String>, function: Arc<dyn ConstraintFunction>, weight: f64) -> Result<()> {
        Self::check_weight(weight)?;
        self.terminal.push(PenalizedConstraint {
            name: name.into(),
            function,
            weight,
            first_stage: 0,
        });
        Ok(())
    }

    pub fn set_input_box(&mut self, bounds: InputBox) {
        self.input_box = Some(bounds);
    }

    pub fn stage(&self) -> &[PenalizedConstraint] {
        &self.stage
    }

    pub fn terminal(&self) -> &[PenalizedConstraint] {
        &self.terminal
    }

    pub fn input_box(&self) -> Option<&InputBox> {
        self.input_box.as_ref()
    }

    pub fn stage_count_at(&self, stage: usize) -> usize {
        self.stage.iter().filter(|c| c.applies_at(stage)).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_value_and_gradient() {
        let c = AffineConstraint::new(DVector::from_vec(vec![-1.0, 0.0, 2.0]), 0.5);
        let x = DVector::from_vec(vec![3.0, 1.0]);
        let u = DVector::from_vec(vec![1.0]);
        assert_eq!(c.value(&x, &u), -3.0 + 2.0 + 0.5);
        assert_eq!(c.gradient(&x, &u), c.coefficients);
    }

    #[test]
    fn closure_gradient_matches_analytic() {
        let c = FnConstraint::new(|x, u| x[0] * x[0] + 3.0 * u[0]);
        let g = c.gradient(&DVector::from_vec(vec![2.0]), &DVector::from_vec(vec![1.0]));
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn rejects_nonpositive_weight() {
        let mut set = ConstraintSet::new();
        let f = Arc::new(AffineConstraint::new(DVector::zeros(1), 0.0));
        assert!(set.push_stage("c", f.clone(), 0.0, 0).is_err());
        assert!(set.push_terminal("c", f, -1.0).is_err());
    }
}
