//! Reduced single-shooting solver for the stochastic OCP over `(ū, K)`.
//!
//! States and covariances are eliminated by forward simulation and the
//! constraint-variance slacks by [`eliminate_beta`]; what remains is a smooth
//! objective with box bounds on `ū`, minimized by projected quasi-Newton
//! descent with finite-difference gradients.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{InputBox, SystemModel};
use crate::objective::{evaluate_prediction, evaluate_suffix, NominalPrediction, ObjectiveBreakdown, ObjectiveOptions};
use crate::uncertainty::Policy;

/// `β = max(ε_σ², H)` elementwise, with `H` clamped below at zero.
pub fn eliminate_beta(variances: &[f64], eps_sigma: f64) -> Vec<f64> {
    let floor = eps_sigma * eps_sigma;
    variances.iter().map(|h| h.max(0.0).max(floor)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Optimizes `ū` with every covariance term dropped.
    Nominal,
    /// Optimizes `ū` with `K ≡ 0` and full uncertainty propagation.
    OpenLoop,
    /// Optimizes `ū` and `K_1 … K_{N−1}`.
    OutputFeedback,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Nominal, Mode::OpenLoop, Mode::OutputFeedback];

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Nominal => "nominal",
            Mode::OpenLoop => "open_loop",
            Mode::OutputFeedback => "output_feedback",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        Mode::ALL.into_iter().find(|m| m.name() == s)
    }

    fn optimizes_gains(&self) -> bool {
        matches!(self, Mode::OutputFeedback)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialGuess {
    /// `ū = 0` clipped to the bounds, `K = 0`.
    #[default]
    Cold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub max_iterations: usize,
    /// Bound on the infinity norm of the projected gradient.
    pub tolerance: f64,
    pub fd_step: f64,
    pub armijo: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
    pub eps_sigma: f64,
    pub eps_k: f64,
    pub mode: Mode,
    pub initial_guess: InitialGuess,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            tolerance: 1e-6,
            fd_step: 1e-6,
            armijo: 1e-4,
            backtrack: 0.5,
            max_backtracks: 40,
            eps_sigma: 1e-3,
            eps_k: 1e-4,
            mode: Mode::OutputFeedback,
            initial_guess: InitialGuess::Cold,
        }
    }
}

impl SolveOptions {
    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.tolerance, self.fd_step, self.armijo, self.eps_sigma];
        if positive.iter().any(|v| v.is_nan() || *v <= 0.0) {
            return Err(Error::RejectedInput("solver tolerances must be positive".into()));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::RejectedInput("backtracking factor must lie in (0, 1)".into()));
        }
        if self.eps_k.is_nan() || self.eps_k < 0.0 {
            return Err(Error::RejectedInput("feedback regularization must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn objective_options(&self) -> ObjectiveOptions {
        ObjectiveOptions {
            eps_sigma: self.eps_sigma,
            eps_k: self.eps_k,
            include_uncertainty: self.mode != Mode::Nominal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    LineSearchFailure,
}

impl SolveStatus {
    pub fn is_converged(&self) -> bool {
        matches!(self, SolveStatus::Converged)
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub policy: Policy,
    pub objective: ObjectiveBreakdown,
    /// Floored constraint variances per stage `0 … N`.
    pub beta: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Infinity norm of the projected gradient at the returned iterate.
    pub stationarity: f64,
    pub status: SolveStatus,
    /// Accepted objective values, starting with the initial point.
    pub history: Vec<f64>,
}

/// The reduced problem: a flat variable vector `[ū_0 … ū_{N−1}, vec K_1 … vec K_{N−1}]`
/// with gains stored row-major.
pub struct ReducedProblem<'a, M: SystemModel + ?Sized> {
    model: &'a M,
    x0: &'a DVector<f64>,
    p0: &'a DMatrix<f64>,
    objective: ObjectiveOptions,
    mode: Mode,
    horizon: usize,
    n_x: usize,
    n_u: usize,
    bounds: Option<InputBox>,
}

impl<'a, M: SystemModel + ?Sized> ReducedProblem<'a, M> {
    pub fn new(model: &'a M, x0: &'a DVector<f64>, p0: &'a DMatrix<f64>, options: &SolveOptions) -> Result<Self> {
        let dims = model.dims();
        if x0.len() != dims.n_x || p0.shape() != (dims.n_x, dims.n_x) {
            return Err(Error::Dimension("initial belief does not match the model".into()));
        }
        Ok(Self {
            model,
            x0,
            p0,
            objective: options.objective_options(),
            mode: options.mode,
            horizon: model.horizon(),
            n_x: dims.n_x,
            n_u: dims.n_u,
            bounds: model.constraints().input_box().cloned(),
        })
    }

    fn control_len(&self) -> usize {
        self.horizon * self.n_u
    }

    fn gain_len(&self) -> usize {
        if self.mode.optimizes_gains() {
            self.horizon.saturating_sub(1) * self.n_u * self.n_x
        } else {
            0
        }
    }

    pub fn len(&self) -> usize {
        self.control_len() + self.gain_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pack(&self, policy: &Policy) -> Vec<f64> {
        let mut z: Vec<f64> = policy.controls().iter().flat_map(|u| u.iter().copied()).collect();
        if self.mode.optimizes_gains() {
            for k in policy.feedback() {
                for i in 0..self.n_u {
                    for j in 0..self.n_x {
                        z.push(k[(i, j)]);
                    }
                }
            }
        }
        z
    }

    pub fn unpack(&self, z: &[f64]) -> Policy {
        let controls: Vec<DVector<f64>> = (0..self.horizon)
            .map(|k| DVector::from_column_slice(&z[k * self.n_u..(k + 1) * self.n_u]))
            .collect();
        if !self.mode.optimizes_gains() {
            return Policy::open_loop(controls, self.n_x);
        }
        let block = self.n_u * self.n_x;
        let offset = self.control_len();
        let feedback = (0..self.horizon.saturating_sub(1))
            .map(|k| DMatrix::from_row_slice(self.n_u, self.n_x, &z[offset + k * block..offset + (k + 1) * block]))
            .collect();
        Policy::new(controls, feedback).expect("unpacked policy shapes are consistent")
    }

    fn bound(&self, i: usize) -> Option<(f64, f64)> {
        if i >= self.control_len() {
            return None;
        }
        self.bounds.as_ref().map(|b| (b.lower[i % self.n_u], b.upper[i % self.n_u]))
    }

    pub fn project(&self, z: &mut [f64]) {
        for (i, zi) in z.iter_mut().enumerate() {
            if let Some((lo, hi)) = self.bound(i) {
                *zi = zi.clamp(lo, hi);
            }
        }
    }

    fn prediction(&self, policy: &Policy) -> Result<NominalPrediction> {
        NominalPrediction::new(
            self.model,
            self.x0,
            self.p0,
            policy.controls(),
            self.objective.include_uncertainty,
        )
    }

    pub fn evaluate(&self, z: &[f64]) -> Result<(ObjectiveBreakdown, Vec<Vec<f64>>)> {
        let policy = self.unpack(z);
        let pred = self.prediction(&policy)?;
        let eval = evaluate_prediction(self.model, &pred, self.p0, &policy, &self.objective)?;
        Ok((eval.breakdown, eval.beta))
    }

    pub fn value(&self, z: &[f64]) -> Result<f64> {
        self.evaluate(z).map(|(b, _)| b.total)
    }

    /// Central-difference gradient with step `h·(1 + |z_i|)`. Perturbations of
    /// the gains reuse the nominal prediction of `z`.
    pub fn gradient(&self, z: &[f64], fd_step: f64) -> Result<Vec<f64>> {
        let base_policy = self.unpack(z);
        let base_pred = self.prediction(&base_policy)?;
        let base = evaluate_prediction(self.model, &base_pred, self.p0, &base_policy, &self.objective)?;
        let n_controls = self.control_len();
        let gain_size = self.n_u * self.n_x;
        (0..self.len())
            .into_par_iter()
            .map(|i| {
                let h = fd_step * (1.0 + z[i].abs());
                let value = |delta: f64| -> Result<f64> {
                    let mut zz = z.to_vec();
                    zz[i] += delta;
                    let policy = self.unpack(&zz);
                    if i < n_controls {
                        let stage = i / self.n_u;
                        let pred = base_pred.with_controls_from(self.model, policy.controls(), stage)?;
                        evaluate_suffix(self.model, &pred, &base, &policy, stage, &self.objective)
                    } else {
                        let stage = 1 + (i - n_controls) / gain_size;
                        evaluate_suffix(self.model, &base_pred, &base, &policy, stage, &self.objective)
                    }
                };
                let g = (value(h)? - value(-h)?) / (2.0 * h);
                if g.is_finite() {
                    Ok(g)
                } else {
                    Err(Error::NonFiniteColumn { column: i })
                }
            })
            .collect()
    }

    /// Infinity norm of `z − P(z − g)`.
    pub fn projected_gradient_norm(&self, z: &[f64], g: &[f64]) -> f64 {
        z.iter()
            .zip(g.iter())
            .enumerate()
            .map(|(i, (zi, gi))| match self.bound(i) {
                Some((lo, hi)) => (zi - (zi - gi).clamp(lo, hi)).abs(),
                None => gi.abs(),
            })
            .fold(0.0, f64::max)
    }

    fn is_blocked(&self, i: usize, zi: f64, gi: f64) -> bool {
        match self.bound(i) {
            Some((lo, hi)) => (zi <= lo && gi > 0.0) || (zi >= hi && gi < 0.0),
            None => false,
        }
    }
}

fn scaled_identity(n: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::identity(n, n) * scale
}

/// Powell-damped BFGS update of a Hessian approximation. Returns whether
/// the raw curvature condition `sᵀy > 0` held.
fn damped_bfgs_update(b: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) -> bool {
    let bs = &*b * s;
    let sbs = s.dot(&bs);
    let sy = s.dot(y);
    if sbs.is_nan() || sbs <= 0.0 {
        return sy > 0.0;
    }
    let r = if sy >= 0.2 * sbs {
        y.clone()
    } else {
        let theta = 0.8 * sbs / (sbs - sy);
        y * theta + &bs * (1.0 - theta)
    };
    let sr = s.dot(&r);
    if sr > 0.0 {
        *b -= &bs * bs.transpose() / sbs;
        *b += &r * r.transpose() / sr;
        let bt = b.transpose();
        *b = (&*b + bt) * 0.5;
    }
    sy > 1e-14 * s.norm() * y.norm()
}

/// Minimizes the approximate stochastic objective from `warm_start` (or the
/// cold initial guess) by projected damped BFGS with Armijo backtracking.
pub fn solve<M: SystemModel + ?Sized>(
    model: &M,
    x0: &DVector<f64>,
    p0: &DMatrix<f64>,
    options: &SolveOptions,
    warm_start: Option<&Policy>,
) -> Result<SolveResult> {
    options.validate()?;
    let problem = ReducedProblem::new(model, x0, p0, options)?;
    let dims = model.dims();
    let horizon = model.horizon();

    let start = match warm_start {
        Some(p) => {
            if p.horizon() != horizon || p.controls().iter().any(|u| u.len() != dims.n_u) {
                return Err(Error::Dimension("warm start does not match the model".into()));
            }
            p.clone()
        }
        None => Policy::open_loop(vec![DVector::zeros(dims.n_u); horizon], dims.n_x),
    };
    let mut z = if options.mode.optimizes_gains() && start.feedback().iter().all(|k| k.shape() == (dims.n_u, dims.n_x)) {
        problem.pack(&start)
    } else {
        let ol = Policy::open_loop(start.controls().to_vec(), dims.n_x);
        let mut zz = problem.pack(&ol);
        zz.resize(problem.len(), 0.0);
        zz
    };
    problem.project(&mut z);

    let n = problem.len();
    let mut f = problem.value(&z)?;
    let mut history = vec![f];
    if n == 0 {
        let (objective, beta) = problem.evaluate(&z)?;
        return Ok(SolveResult {
            policy: problem.unpack(&z),
            objective,
            beta,
            iterations: 0,
            stationarity: 0.0,
            status: SolveStatus::Converged,
            history,
        });
    }
    let mut g = problem.gradient(&z, options.fd_step)?;
    let mut scale = DVector::from_column_slice(&g).norm().max(1e-8);
    let mut hess = scaled_identity(n, scale);
    let mut curvature_failures = 0usize;
    let mut status = SolveStatus::MaxIter;
    let mut iterations = 0usize;
    let mut stationarity = problem.projected_gradient_norm(&z, &g);

    while iterations < options.max_iterations {
        if stationarity <= options.tolerance {
            status = SolveStatus::Converged;
            break;
        }
        let free: Vec<usize> = (0..n).filter(|&i| !problem.is_blocked(i, z[i], g[i])).collect();
        let mut accepted = None;
        let mut reset_done = false;
        loop {
            let direction = search_direction(&hess, &g, &free, n);
            let direction = match direction {
                Some(d) => d,
                None => {
                    hess = scaled_identity(n, scale);
                    reset_done = true;
                    search_direction(&hess, &g, &free, n).expect("identity system is solvable")
                }
            };
            if let Some(step) = line_search(&problem, &z, f, &g, &direction, options) {
                accepted = Some(step);
                break;
            }
            if reset_done {
                break;
            }
            hess = scaled_identity(n, scale);
            reset_done = true;
        }
        let Some((z_new, f_new, alpha)) = accepted else {
            status = SolveStatus::LineSearchFailure;
            break;
        };
        let g_new = match problem.gradient(&z_new, options.fd_step) {
            Ok(g) => g,
            Err(_) => {
                status = SolveStatus::LineSearchFailure;
                break;
            }
        };
        let s = DVector::from_iterator(n, z_new.iter().zip(z.iter()).map(|(a, b)| a - b));
        let y = DVector::from_iterator(n, g_new.iter().zip(g.iter()).map(|(a, b)| a - b));
        if damped_bfgs_update(&mut hess, &s, &y) {
            curvature_failures = 0;
        } else {
            curvature_failures += 1;
            if curvature_failures >= 3 {
                hess = scaled_identity(n, scale);
                curvature_failures = 0;
            }
        }
        z = z_new;
        f = f_new;
        g = g_new;
        scale = DVector::from_column_slice(&g).norm().max(1e-8);
        history.push(f);
        iterations += 1;
        stationarity = problem.projected_gradient_norm(&z, &g);
        log::debug!(
            "iteration {iterations}: f = {f:e}, projected gradient = {stationarity:e}, |s| = {:e}, step = {alpha:e}, free = {}, reset = {reset_done}",
            s.norm(),
            free.len()
        );
    }
    if status == SolveStatus::MaxIter && stationarity <= options.tolerance {
        status = SolveStatus::Converged;
    }
    let (objective, beta) = problem.evaluate(&z)?;
    Ok(SolveResult {
        policy: problem.unpack(&z),
        objective,
        beta,
        iterations,
        stationarity,
        status,
        history,
    })
}

fn search_direction(hess: &DMatrix<f64>, g: &[f64], free: &[usize], n: usize) -> Option<Vec<f64>> {
    let m = free.len();
    let mut d = vec![0.0; n];
    if m == 0 {
        return Some(d);
    }
    let sub = DMatrix::from_fn(m, m, |i, j| hess[(free[i], free[j])]);
    let rhs = DVector::from_iterator(m, free.iter().map(|&i| -g[i]));
    let chol = sub.cholesky()?;
    let sol = chol.solve(&rhs);
    let slope: f64 = free.iter().zip(sol.iter()).map(|(&i, di)| g[i] * di).sum();
    if slope.is_nan() || slope >= 0.0 || !sol.iter().all(|v| v.is_finite()) {
        return None;
    }
    for (k, &i) in free.iter().enumerate() {
        d[i] = sol[k];
    }
    Some(d)
}

fn line_search<M: SystemModel + ?Sized>(
    problem: &ReducedProblem<'_, M>,
    z: &[f64],
    f: f64,
    g: &[f64],
    d: &[f64],
    options: &SolveOptions,
) -> Option<(Vec<f64>, f64, f64)> {
    let mut alpha = 1.0;
    for _ in 0..=options.max_backtracks {
        let mut trial: Vec<f64> = z.iter().zip(d.iter()).map(|(zi, di)| zi + alpha * di).collect();
        problem.project(&mut trial);
        let decrease: f64 = trial.iter().zip(z.iter()).zip(g.iter()).map(|((t, zi), gi)| gi * (t - zi)).sum();
        if trial.iter().zip(z.iter()).all(|(a, b)| a == b) {
            return None;
        }
        if let Ok(ft) = problem.value(&trial) {
            if ft <= f + options.armijo * decrease.min(0.0) && ft <= f {
                return Some((trial, ft, alpha));
            }
        }
        alpha *= options.backtrack;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_elimination_floors_and_passes_through() {
        assert_eq!(eliminate_beta(&[0.0], 1e-3), vec![1e-6]);
        assert_eq!(eliminate_beta(&[4.0], 1e-3), vec![4.0]);
        assert_eq!(eliminate_beta(&[-1e-12], 1e-3), vec![1e-6]);
    }

    #[test]
    fn rejects_bad_options() {
        let o = SolveOptions {
            backtrack: 1.5,
            ..SolveOptions::default()
        };
        assert!(o.validate().is_err());
        let o = SolveOptions {
            tolerance: 0.0,
            ..SolveOptions::default()
        };
        assert!(o.validate().is_err());
    }

    #[test]
    fn damped_update_keeps_positive_definite() {
        let mut b = DMatrix::identity(2, 2);
        let s = DVector::from_vec(vec![1.0, 0.0]);
        let y = DVector::from_vec(vec![-1.0, 0.5]);
        let ok = damped_bfgs_update(&mut b, &s, &y);
        assert!(!ok);
        assert!(b.clone().cholesky().is_some());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(Mode::parse(m.name()), Some(m));
        }
        assert_eq!(Mode::parse("bogus"), None);
    }
}
