//! Exact Gaussian expectations of the quadratic costs and of the linear
//! constraint-violation penalty under the linearized uncertainty model.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::trace_product;
use crate::model::{PenalizedConstraint, QuadraticCost, SystemModel};
use crate::solver::eliminate_beta;
use crate::uncertainty::{
    joint_covariance, kalman_recursion, kalman_recursion_from, linearize_trajectory, linearize_trajectory_from,
    nominal_rollout, nominal_rollout_from, propagate_with_terms,
    AugmentedCovariance, AugmentedTerms, KalmanSequence, NominalTrajectory, Policy, StageLinearization,
};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const TAIL_CUTOFF: f64 = 8.0;

pub fn normal_pdf(t: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * t * t).exp()
}

/// Standard normal CDF via the complementary error function.
pub fn normal_cdf(t: f64) -> f64 {
    0.5 * libm::erfc(-t / std::f64::consts::SQRT_2)
}

/// `p(t) + t·P(t)`, i.e. `E[max(0, ν + t)]` for `ν ~ N(0, 1)`.
fn unit_relu(t: f64) -> f64 {
    if t < -TAIL_CUTOFF {
        // p(t)/t² · (1 − 3/t² + 15/t⁴ − 105/t⁶ + 945/t⁸)
        let r = 1.0 / (t * t);
        let series = 1.0 - r * (3.0 - r * (15.0 - r * (105.0 - r * 945.0)));
        normal_pdf(t) * r * series
    } else if t > TAIL_CUTOFF {
        t + unit_relu(-t)
    } else {
        (normal_pdf(t) + t * normal_cdf(t)).max(0.0)
    }
}

/// `φ̃(μ, σ) = E[max(0, η)]` for `η ~ N(μ, σ²)`.
pub fn expected_relu(mu: f64, sigma: f64) -> Result<f64> {
    if !sigma.is_finite() || sigma < 0.0 || !mu.is_finite() {
        return Err(Error::RejectedInput(format!("expected_relu needs finite μ and σ ≥ 0, got ({mu}, {sigma})")));
    }
    if sigma == 0.0 {
        return Ok(mu.max(0.0));
    }
    Ok(sigma * unit_relu(mu / sigma))
}

/// `E[l(z)]` for `z ~ N(mean, cov)`: `l(z̄) + ½ tr(B Σ̃)`.
pub fn expected_quadratic(cost: &QuadraticCost, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let n = cost.dim();
    if mean.len() != n || cov.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "cost of dimension {n} vs mean {} and covariance {:?}",
            mean.len(),
            cov.shape()
        )));
    }
    Ok(cost.eval(mean) + 0.5 * trace_product(cost.hessian(), cov))
}

/// Variance in a constraint's normal direction: `∇hᵀ Σ̃ ∇h`.
pub fn constraint_direction_variance(gradient: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    gradient.dot(&(cov * gradient))
}

/// `Σ ρ_i φ̃(h̄_i, √β_i)` after flooring `β` at `ε_σ²`.
pub fn penalty_total(h_bar: &[f64], beta: &[f64], weights: &[f64], eps_sigma: f64) -> Result<f64> {
    if h_bar.len() != beta.len() || h_bar.len() != weights.len() {
        return Err(Error::Dimension("penalty inputs differ in length".into()));
    }
    let floored = eliminate_beta(beta, eps_sigma);
    let mut acc = 0.0;
    for ((h, b), rho) in h_bar.iter().zip(floored.iter()).zip(weights.iter()) {
        acc += rho * expected_relu(*h, b.sqrt())?;
    }
    Ok(acc)
}

/// `r(K) = ε_K Σ_k ‖K_k‖_F²` over the supplied gains.
pub fn feedback_regularization(gains: &[DMatrix<f64>], eps_k: f64) -> f64 {
    eps_k * gains.iter().map(|k| k.norm_squared()).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveOptions {
    /// Floor `ε_σ` on the constraint-direction standard deviation.
    pub eps_sigma: f64,
    /// Feedback regularization weight `ε_K`.
    pub eps_k: f64,
    /// When false every covariance is treated as zero: nominal MPC.
    pub include_uncertainty: bool,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        Self {
            eps_sigma: 1e-3,
            eps_k: 1e-4,
            include_uncertainty: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub nominal_cost: f64,
    pub variance_cost: f64,
    pub penalty: f64,
    pub regularization: f64,
    pub total: f64,
}

/// Everything computed along the way to an objective value.
#[derive(Debug, Clone)]
pub struct ObjectiveEvaluation {
    pub breakdown: ObjectiveBreakdown,
    /// Augmented covariances `Σ_0 … Σ_N`; empty when uncertainty is excluded.
    pub covariances: Vec<AugmentedCovariance>,
    /// Nominal constraint values per stage `0 … N` (stage constraints, then terminal at `N`).
    pub h_bar: Vec<Vec<f64>>,
    /// Floored variances matching `h_bar`.
    pub beta: Vec<Vec<f64>>,
    /// Per-stage `½tr(BΣ̃)` and expected penalty, stages `0 … N`.
    pub stage_variance_cost: Vec<f64>,
    pub stage_penalty: Vec<f64>,
}

/// Gain-independent quantities of one stage of the nominal trajectory.
#[derive(Debug, Clone)]
struct NominalStage {
    cost: f64,
    h: Vec<f64>,
    gradients: Vec<DVector<f64>>,
    weights: Vec<f64>,
}

/// The parts of the prediction that depend only on `(x̂_0, P̂_0, ū)`.
#[derive(Debug, Clone)]
pub struct NominalPrediction {
    pub trajectory: NominalTrajectory,
    pub linearization: Option<StageLinearization>,
    pub kalman: Option<KalmanSequence>,
    terms: Option<AugmentedTerms>,
    stages: Vec<NominalStage>,
}

fn nominal_stage(cost: &QuadraticCost, x: &DVector<f64>, u: &DVector<f64>, active: &[&PenalizedConstraint]) -> NominalStage {
    let z = stack(x, u);
    NominalStage {
        cost: cost.eval(&z),
        h: active.iter().map(|c| c.function.value(x, u)).collect(),
        gradients: active.iter().map(|c| c.function.gradient(x, u)).collect(),
        weights: active.iter().map(|c| c.weight).collect(),
    }
}

fn nominal_stages<M: SystemModel + ?Sized>(
    model: &M,
    trajectory: &NominalTrajectory,
    mut stages: Vec<NominalStage>,
    from: usize,
) -> Vec<NominalStage> {
    let n = model.horizon();
    let constraints = model.constraints();
    for k in from..n {
        let active: Vec<&PenalizedConstraint> = constraints.stage().iter().filter(|c| c.applies_at(k)).collect();
        stages.push(nominal_stage(
            model.stage_cost(k),
            &trajectory.states[k],
            &trajectory.controls[k],
            &active,
        ));
    }
    let terminal: Vec<&PenalizedConstraint> = constraints.terminal().iter().collect();
    stages.push(nominal_stage(
        model.terminal_cost(),
        &trajectory.states[n],
        &DVector::zeros(0),
        &terminal,
    ));
    stages
}

impl NominalPrediction {
    pub fn new<M: SystemModel + ?Sized>(
        model: &M,
        x0: &DVector<f64>,
        p0: &DMatrix<f64>,
        controls: &[DVector<f64>],
        include_uncertainty: bool,
    ) -> Result<Self> {
        let n = model.horizon();
        if controls.len() != n {
            return Err(Error::Dimension(format!(
                "policy horizon {} does not match model horizon {}",
                controls.len(),
                n
            )));
        }
        let trajectory = nominal_rollout(model, x0, controls)?;
        let stages = nominal_stages(model, &trajectory, Vec::new(), 0);
        let (linearization, kalman, terms) = if include_uncertainty {
            let lin = linearize_trajectory(model, &trajectory)?;
            let kalman = kalman_recursion(&lin, p0)?;
            let terms = AugmentedTerms::new(&lin, &kalman.gains)?;
            (Some(lin), Some(kalman), Some(terms))
        } else {
            (None, None, None)
        };
        Ok(Self {
            trajectory,
            linearization,
            kalman,
            terms,
            stages,
        })
    }

    /// Prediction for `controls`, which agree with this prediction's
    /// controls before stage `from`. Everything before `from` is reused.
    pub fn with_controls_from<M: SystemModel + ?Sized>(&self, model: &M, controls: &[DVector<f64>], from: usize) -> Result<Self> {
        let trajectory = nominal_rollout_from(model, &self.trajectory, controls, from)?;
        let stages = nominal_stages(model, &trajectory, self.stages[..from].to_vec(), from);
        let (linearization, kalman, terms) = match (&self.linearization, &self.kalman, &self.terms) {
            (Some(lin), Some(kal), Some(terms)) => {
                let lin = linearize_trajectory_from(model, &trajectory, lin, from)?;
                let kalman = kalman_recursion_from(&lin, kal, from)?;
                let terms = terms.recompute_from(&lin, &kalman.gains, from)?;
                (Some(lin), Some(kalman), Some(terms))
            }
            _ => (None, None, None),
        };
        Ok(Self {
            trajectory,
            linearization,
            kalman,
            terms,
            stages,
        })
    }

    /// Variance cost, expected penalty and floored variances of stage `k`
    /// given the covariance of `(x_k, u_k)` (or of `x_N` at the terminal stage).
    fn stage_terms(&self, model: &dyn StageCosts, k: usize, cov: Option<&DMatrix<f64>>, eps_sigma: f64) -> Result<(f64, f64, Vec<f64>)> {
        let st = &self.stages[k];
        let variance_cost = match cov {
            Some(cov) => 0.5 * trace_product(model.hessian(k), cov),
            None => 0.0,
        };
        let vars: Vec<f64> = st
            .gradients
            .iter()
            .map(|g| cov.map(|c| constraint_direction_variance(g, c).max(0.0)).unwrap_or(0.0))
            .collect();
        let beta = eliminate_beta(&vars, eps_sigma);
        let penalty = penalty_total(&st.h, &beta, &st.weights, eps_sigma)?;
        Ok((variance_cost, penalty, beta))
    }
}

/// Stage cost Hessians by stage index, terminal at `N`.
trait StageCosts {
    fn hessian(&self, k: usize) -> &DMatrix<f64>;
}

struct ModelCosts<'a, M: SystemModel + ?Sized>(&'a M);

impl<M: SystemModel + ?Sized> StageCosts for ModelCosts<'_, M> {
    fn hessian(&self, k: usize) -> &DMatrix<f64> {
        if k < self.0.horizon() {
            self.0.stage_cost(k).hessian()
        } else {
            self.0.terminal_cost().hessian()
        }
    }
}

fn stack(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(x.len() + u.len(), x.iter().chain(u.iter()).copied())
}

fn stage_covariance(sigma: &AugmentedCovariance, policy: &Policy, k: usize, horizon: usize) -> Result<DMatrix<f64>> {
    if k < horizon {
        joint_covariance(sigma, policy.gain(k))
    } else {
        Ok(sigma.state())
    }
}

fn finish(
    prediction: &NominalPrediction,
    policy: &Policy,
    options: &ObjectiveOptions,
    stage_variance_cost: &[f64],
    stage_penalty: &[f64],
) -> Result<ObjectiveBreakdown> {
    let nominal_cost: f64 = prediction.stages.iter().map(|s| s.cost).sum();
    let variance_cost: f64 = stage_variance_cost.iter().sum();
    let penalty: f64 = stage_penalty.iter().sum();
    let regularization = if options.include_uncertainty {
        feedback_regularization(policy.feedback(), options.eps_k)
    } else {
        0.0
    };
    let total = nominal_cost + variance_cost + penalty + regularization;
    if !total.is_finite() {
        return Err(Error::NonFinite {
            stage: prediction.stages.len() - 1,
            what: "objective".into(),
        });
    }
    Ok(ObjectiveBreakdown {
        nominal_cost,
        variance_cost,
        penalty,
        regularization,
        total,
    })
}

/// Evaluates the objective for `policy` given a prediction built from the same `ū`.
pub fn evaluate_prediction<M: SystemModel + ?Sized>(
    model: &M,
    prediction: &NominalPrediction,
    p0: &DMatrix<f64>,
    policy: &Policy,
    options: &ObjectiveOptions,
) -> Result<ObjectiveEvaluation> {
    let n = model.horizon();
    let covariances = match (&prediction.linearization, &prediction.terms, options.include_uncertainty) {
        (Some(lin), Some(terms), true) => propagate_with_terms(lin, terms, policy, p0)?,
        (_, _, true) => return Err(Error::RejectedInput("prediction was built without uncertainty".into())),
        _ => {
            if policy.horizon() != n {
                return Err(Error::Dimension("policy horizon does not match the model".into()));
            }
            Vec::new()
        }
    };
    let costs = ModelCosts(model);
    let mut stage_variance_cost = Vec::with_capacity(n + 1);
    let mut stage_penalty = Vec::with_capacity(n + 1);
    let mut beta = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let cov = match covariances.get(k) {
            Some(sigma) => Some(stage_covariance(sigma, policy, k, n)?),
            None => None,
        };
        let (v, p, b) = prediction.stage_terms(&costs, k, cov.as_ref(), options.eps_sigma)?;
        stage_variance_cost.push(v);
        stage_penalty.push(p);
        beta.push(b);
    }
    let breakdown = finish(prediction, policy, options, &stage_variance_cost, &stage_penalty)?;
    Ok(ObjectiveEvaluation {
        breakdown,
        covariances,
        h_bar: prediction.stages.iter().map(|s| s.h.clone()).collect(),
        beta,
        stage_variance_cost,
        stage_penalty,
    })
}

/// Total objective of `policy` under `prediction`, where policy and
/// prediction agree with those behind `base` on every stage before `from`.
/// Stages before `from` are taken from `base`.
pub fn evaluate_suffix<M: SystemModel + ?Sized>(
    model: &M,
    prediction: &NominalPrediction,
    base: &ObjectiveEvaluation,
    policy: &Policy,
    from: usize,
    options: &ObjectiveOptions,
) -> Result<f64> {
    let n = model.horizon();
    let j = from.min(n);
    let costs = ModelCosts(model);
    let mut variance = base.stage_variance_cost.clone();
    let mut penalty = base.stage_penalty.clone();
    if variance.len() != n + 1 || policy.horizon() != n {
        return Err(Error::Dimension("base evaluation does not match the model".into()));
    }
    let propagation = match (&prediction.linearization, &prediction.terms, options.include_uncertainty) {
        (Some(lin), Some(terms), true) => {
            let sigma = base
                .covariances
                .get(j)
                .ok_or_else(|| Error::Dimension("base evaluation has no covariances".into()))?;
            Some((lin, terms, sigma.clone()))
        }
        (_, _, true) => return Err(Error::RejectedInput("prediction was built without uncertainty".into())),
        _ => None,
    };
    let mut sigma = propagation.as_ref().map(|p| p.2.clone());
    for k in j..=n {
        let cov = match (&propagation, sigma.as_mut()) {
            (Some((lin, terms, _)), Some(s)) => {
                if k > j {
                    *s = terms.step(lin, k - 1, policy.gain(k - 1), s);
                }
                Some(stage_covariance(s, policy, k, n)?)
            }
            _ => None,
        };
        let (v, p, _) = prediction.stage_terms(&costs, k, cov.as_ref(), options.eps_sigma)?;
        variance[k] = v;
        penalty[k] = p;
    }
    finish(prediction, policy, options, &variance, &penalty).map(|b| b.total)
}

pub fn evaluate_objective<M: SystemModel + ?Sized>(
    model: &M,
    x0: &DVector<f64>,
    p0: &DMatrix<f64>,
    policy: &Policy,
    options: &ObjectiveOptions,
) -> Result<ObjectiveEvaluation> {
    let prediction = NominalPrediction::new(model, x0, p0, policy.controls(), options.include_uncertainty)?;
    evaluate_prediction(model, &prediction, p0, policy, options)
}

/// Approximate expected cost plus expected penalty plus feedback regularization.
pub fn total_objective<M: SystemModel + ?Sized>(
    model: &M,
    x0: &DVector<f64>,
    p0: &DMatrix<f64>,
    policy: &Policy,
    options: &ObjectiveOptions,
) -> Result<ObjectiveBreakdown> {
    evaluate_objective(model, x0, p0, policy, options).map(|e| e.breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_at_zero_mean() {
        assert!((expected_relu(0.0, 1.0).unwrap() - FRAC_1_SQRT_2PI).abs() < 1e-15);
    }

    #[test]
    fn relu_degenerate() {
        assert_eq!(expected_relu(2.0, 0.0).unwrap(), 2.0);
        assert_eq!(expected_relu(-2.0, 0.0).unwrap(), 0.0);
        assert!(expected_relu(0.0, -1.0).is_err());
    }

    #[test]
    fn relu_known_value() {
        // p(1) − P(−1)
        let expect = 0.241_970_724_519_143_37 - 0.158_655_253_931_457_05;
        assert!((expected_relu(-1.0, 1.0).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn relu_tail_is_continuous() {
        for side in [-1.0, 1.0] {
            let inner = unit_relu(side * (TAIL_CUTOFF - 1e-9));
            let outer = unit_relu(side * (TAIL_CUTOFF + 1e-9));
            let scale = if side < 0.0 { inner } else { 1.0 };
            assert!((inner - outer).abs() <= 1e-3 * scale, "{inner} vs {outer}");
        }
        assert!(unit_relu(-40.0) >= 0.0);
        assert!((unit_relu(40.0) - 40.0).abs() < 1e-12);
    }

    #[test]
    fn quadratic_expectations() {
        let cost = QuadraticCost::new(DMatrix::identity(2, 2), DVector::zeros(2), 0.0).unwrap();
        let zero = DVector::zeros(2);
        assert_eq!(expected_quadratic(&cost, &zero, &DMatrix::identity(2, 2)).unwrap(), 1.0);
        let mean = DVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(expected_quadratic(&cost, &mean, &DMatrix::zeros(2, 2)).unwrap(), 0.5);
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![0.25, 1.0]));
        assert!((expected_quadratic(&cost, &mean, &cov).unwrap() - 1.125).abs() < 1e-15);
    }

    #[test]
    fn direction_variance() {
        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        assert_eq!(constraint_direction_variance(&e1, &cov), 4.0);
        assert_eq!(constraint_direction_variance(&e1, &DMatrix::zeros(2, 2)), 0.0);
    }

    #[test]
    fn penalty_values() {
        let deep = penalty_total(&[-1e6, -1e6], &[0.0, 5.0], &[1e3, 1e3], 1e-3).unwrap();
        assert!(deep < 1e-300);
        let one = penalty_total(&[0.0], &[1.0], &[1e3], 1e-3).unwrap();
        assert!((one - 1e3 * FRAC_1_SQRT_2PI).abs() < 1e-10);
        let a = penalty_total(&[0.3], &[0.5], &[2.0], 1e-3).unwrap();
        let b = penalty_total(&[-0.4], &[2.0], &[7.0], 1e-3).unwrap();
        let both = penalty_total(&[0.3, -0.4], &[0.5, 2.0], &[2.0, 7.0], 1e-3).unwrap();
        assert!((both - (a + b)).abs() < 1e-14);
    }

    #[test]
    fn regularization_values() {
        assert_eq!(feedback_regularization(&[DMatrix::zeros(2, 3)], 1.0), 0.0);
        let k = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(feedback_regularization(std::slice::from_ref(&k), 0.5), 1.0);
        let r1 = feedback_regularization(std::slice::from_ref(&k), 0.3);
        let r3 = feedback_regularization(&[k * 3.0], 0.3);
        assert!((r3 - 9.0 * r1).abs() < 1e-14);
    }
}
