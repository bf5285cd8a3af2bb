//! Classical Runge–Kutta discretization with the noise held constant over
//! the interval, plus forward sensitivities of the discrete map.

use nalgebra::{SMatrix, SVector};

use crate::error::{Error, Result};

/// Continuous-time dynamics `ẋ = F(x, u, w)` with its partial derivatives.
pub trait ContinuousDynamics<const NX: usize, const NU: usize, const NW: usize> {
    fn rhs(&self, x: &SVector<f64, NX>, u: &SVector<f64, NU>, w: &SVector<f64, NW>) -> SVector<f64, NX>;

    /// `(∂F/∂x, ∂F/∂u, ∂F/∂w)`.
    fn rhs_jacobians(
        &self,
        x: &SVector<f64, NX>,
        u: &SVector<f64, NU>,
        w: &SVector<f64, NW>,
    ) -> (SMatrix<f64, NX, NX>, SMatrix<f64, NX, NU>, SMatrix<f64, NX, NW>);
}

pub const DEFAULT_SUBSTEPS: usize = 4;

fn check_inputs<const NX: usize, const NU: usize, const NW: usize>(
    x: &SVector<f64, NX>,
    u: &SVector<f64, NU>,
    w: &SVector<f64, NW>,
    dt: f64,
    substeps: usize,
) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::RejectedInput(format!("integration interval must be positive, got {dt}")));
    }
    if substeps == 0 {
        return Err(Error::RejectedInput("at least one RK4 substep is required".into()));
    }
    if !x.iter().chain(u.iter()).chain(w.iter()).all(|v| v.is_finite()) {
        return Err(Error::RejectedInput("non-finite state, control, or noise".into()));
    }
    Ok(())
}

/// Integrates over `dt` with `substeps` RK4 steps, `u` and `w` held constant.
pub fn rk4_step<const NX: usize, const NU: usize, const NW: usize, O>(
    ode: &O,
    x: &SVector<f64, NX>,
    u: &SVector<f64, NU>,
    w: &SVector<f64, NW>,
    dt: f64,
    substeps: usize,
) -> Result<SVector<f64, NX>>
where
    O: ContinuousDynamics<NX, NU, NW>,
{
    check_inputs(x, u, w, dt, substeps)?;
    let h = dt / substeps as f64;
    let mut s = *x;
    for _ in 0..substeps {
        let k1 = ode.rhs(&s, u, w);
        let k2 = ode.rhs(&(s + k1 * (0.5 * h)), u, w);
        let k3 = ode.rhs(&(s + k2 * (0.5 * h)), u, w);
        let k4 = ode.rhs(&(s + k3 * h), u, w);
        s += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    Ok(s)
}

/// Result of [`rk4_step_with_sensitivities`]: the end state and the exact
/// derivatives of the discrete map with respect to `x`, `u`, and `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rk4Sensitivities<const NX: usize, const NU: usize, const NW: usize> {
    pub state: SVector<f64, NX>,
    pub dx: SMatrix<f64, NX, NX>,
    pub du: SMatrix<f64, NX, NU>,
    pub dw: SMatrix<f64, NX, NW>,
}

/// Same integration as [`rk4_step`], differentiated through every stage.
pub fn rk4_step_with_sensitivities<const NX: usize, const NU: usize, const NW: usize, O>(
    ode: &O,
    x: &SVector<f64, NX>,
    u: &SVector<f64, NU>,
    w: &SVector<f64, NW>,
    dt: f64,
    substeps: usize,
) -> Result<Rk4Sensitivities<NX, NU, NW>>
where
    O: ContinuousDynamics<NX, NU, NW>,
{
    check_inputs(x, u, w, dt, substeps)?;
    let h = dt / substeps as f64;
    let mut s = *x;
    let mut sx = SMatrix::<f64, NX, NX>::identity();
    let mut su = SMatrix::<f64, NX, NU>::zeros();
    let mut sw = SMatrix::<f64, NX, NW>::zeros();

    for _ in 0..substeps {
        // stage i evaluated at s + c_i h k_{i-1}; its sensitivities follow the chain rule.
        let eval = |p: &SVector<f64, NX>,
                    px: &SMatrix<f64, NX, NX>,
                    pu: &SMatrix<f64, NX, NU>,
                    pw: &SMatrix<f64, NX, NW>| {
            let k = ode.rhs(p, u, w);
            let (fx, fu, fw) = ode.rhs_jacobians(p, u, w);
            (k, fx * px, fx * pu + fu, fx * pw + fw)
        };
        let (k1, k1x, k1u, k1w) = eval(&s, &sx, &su, &sw);
        let c = 0.5 * h;
        let (k2, k2x, k2u, k2w) = eval(&(s + k1 * c), &(sx + k1x * c), &(su + k1u * c), &(sw + k1w * c));
        let (k3, k3x, k3u, k3w) = eval(&(s + k2 * c), &(sx + k2x * c), &(su + k2u * c), &(sw + k2w * c));
        let (k4, k4x, k4u, k4w) = eval(&(s + k3 * h), &(sx + k3x * h), &(su + k3u * h), &(sw + k3w * h));
        let g = h / 6.0;
        s += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * g;
        sx += (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * g;
        su += (k1u + k2u * 2.0 + k3u * 2.0 + k4u) * g;
        sw += (k1w + k2w * 2.0 + k3w * 2.0 + k4w) * g;
    }
    Ok(Rk4Sensitivities {
        state: s,
        dx: sx,
        du: su,
        dw: sw,
    })
}
