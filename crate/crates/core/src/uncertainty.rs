//! Nominal rollout, linearization along it, and propagation of the joint
//! covariance of the state deviation and the estimation error under an
//! estimate-feedback policy `u_k = ū_k + K_k (x̂_k − x̄_k)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, all_finite_vec, right_solve_spd, symmetrize};
use crate::model::{check_dynamics_jacobians, check_output_jacobians, SystemModel};

/// Noise-free simulation `x̄_{k+1} = f_k(x̄_k, ū_k, 0)`, `ȳ_{k+1} = g_{k+1}(x̄_{k+1}, 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NominalTrajectory {
    /// `x̄_0 … x̄_N`
    pub states: Vec<DVector<f64>>,
    /// `ū_0 … ū_{N−1}`
    pub controls: Vec<DVector<f64>>,
    /// `ȳ_1 … ȳ_N`; `outputs[k]` is `ȳ_{k+1}`.
    pub outputs: Vec<DVector<f64>>,
}

impl NominalTrajectory {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }
}

pub fn nominal_rollout<M: SystemModel + ?Sized>(
    model: &M,
    x0: &DVector<f64>,
    controls: &[DVector<f64>],
) -> Result<NominalTrajectory> {
    let dims = model.dims();
    if x0.len() != dims.n_x {
        return Err(Error::Dimension(format!("initial state has length {}, expected {}", x0.len(), dims.n_x)));
    }
    if !all_finite_vec(x0) {
        return Err(Error::NonFinite {
            stage: 0,
            what: "initial state".into(),
        });
    }
    let mut traj = NominalTrajectory {
        states: Vec::with_capacity(controls.len() + 1),
        controls: controls.to_vec(),
        outputs: Vec::with_capacity(controls.len()),
    };
    traj.states.push(x0.clone());
    extend_rollout(model, &mut traj, 0)?;
    Ok(traj)
}

/// Rollout that reuses `base` up to stage `from`; `controls` must agree with
/// `base.controls` before `from`.
pub fn nominal_rollout_from<M: SystemModel + ?Sized>(
    model: &M,
    base: &NominalTrajectory,
    controls: &[DVector<f64>],
    from: usize,
) -> Result<NominalTrajectory> {
    if controls.len() != base.horizon() || from > base.horizon() {
        return Err(Error::Dimension("rollout prefix does not match".into()));
    }
    let mut traj = NominalTrajectory {
        states: base.states[..=from].to_vec(),
        controls: controls.to_vec(),
        outputs: base.outputs[..from].to_vec(),
    };
    extend_rollout(model, &mut traj, from)?;
    Ok(traj)
}

fn extend_rollout<M: SystemModel + ?Sized>(model: &M, traj: &mut NominalTrajectory, from: usize) -> Result<()> {
    let dims = model.dims();
    let w0 = DVector::zeros(dims.n_w);
    let v0 = DVector::zeros(dims.n_v);
    for k in from..traj.controls.len() {
        let u = &traj.controls[k];
        if u.len() != dims.n_u {
            return Err(Error::Dimension(format!("control {k} has length {}, expected {}", u.len(), dims.n_u)));
        }
        let next = model.dynamics(k, &traj.states[k], u, &w0).map_err(|e| Error::NonFinite {
            stage: k,
            what: e.to_string(),
        })?;
        if !all_finite_vec(&next) {
            return Err(Error::NonFinite {
                stage: k + 1,
                what: "nominal state".into(),
            });
        }
        let y = model.output(k + 1, &next, &v0)?;
        traj.states.push(next);
        traj.outputs.push(y);
    }
    Ok(())
}

/// Per-stage matrices of the system linearized along a nominal trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct StageLinearization {
    /// `Ā_0 … Ā_{N−1}`
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub gamma: Vec<DMatrix<f64>>,
    /// `C̄_1 … C̄_N`; `c[k]` is `C̄_{k+1}`.
    pub c: Vec<DMatrix<f64>>,
    /// `D̄_1 … D̄_N`; `d[k]` is `D̄_{k+1}`.
    pub d: Vec<DMatrix<f64>>,
}

impl StageLinearization {
    pub fn horizon(&self) -> usize {
        self.a.len()
    }

    pub fn n_x(&self) -> usize {
        self.a.first().map(|a| a.nrows()).unwrap_or(0)
    }

    fn check(&self) -> Result<()> {
        let n = self.horizon();
        if self.b.len() != n || self.gamma.len() != n || self.c.len() != n || self.d.len() != n {
            return Err(Error::Dimension("linearization sequences differ in length".into()));
        }
        Ok(())
    }
}

pub fn linearize_trajectory<M: SystemModel + ?Sized>(model: &M, traj: &NominalTrajectory) -> Result<StageLinearization> {
    let n = traj.horizon();
    let mut lin = StageLinearization {
        a: Vec::with_capacity(n),
        b: Vec::with_capacity(n),
        gamma: Vec::with_capacity(n),
        c: Vec::with_capacity(n),
        d: Vec::with_capacity(n),
    };
    extend_linearization(model, traj, &mut lin, 0)?;
    Ok(lin)
}

/// Linearization that reuses stages before `from` of `base`; `traj` must
/// agree with the trajectory behind `base` up to state `from`.
pub fn linearize_trajectory_from<M: SystemModel + ?Sized>(
    model: &M,
    traj: &NominalTrajectory,
    base: &StageLinearization,
    from: usize,
) -> Result<StageLinearization> {
    base.check()?;
    if from > base.horizon() || base.horizon() != traj.horizon() {
        return Err(Error::Dimension("linearization prefix does not match".into()));
    }
    let mut lin = StageLinearization {
        a: base.a[..from].to_vec(),
        b: base.b[..from].to_vec(),
        gamma: base.gamma[..from].to_vec(),
        c: base.c[..from].to_vec(),
        d: base.d[..from].to_vec(),
    };
    extend_linearization(model, traj, &mut lin, from)?;
    Ok(lin)
}

fn extend_linearization<M: SystemModel + ?Sized>(
    model: &M,
    traj: &NominalTrajectory,
    lin: &mut StageLinearization,
    from: usize,
) -> Result<()> {
    let dims = model.dims();
    let n = traj.horizon();
    if traj.states.len() != n + 1 {
        return Err(Error::Dimension("trajectory needs N+1 states".into()));
    }
    let wrap = |stage: usize| move |e: Error| Error::Jacobian { stage, source: Box::new(e) };
    for k in from..n {
        let dj = model
            .dynamics_jacobians(k, &traj.states[k], &traj.controls[k])
            .and_then(|j| check_dynamics_jacobians(dims, &j).map(|_| j))
            .map_err(wrap(k))?;
        let oj = model
            .output_jacobians(k + 1, &traj.states[k + 1])
            .and_then(|j| check_output_jacobians(dims, &j).map(|_| j))
            .map_err(wrap(k + 1))?;
        if ![&dj.a, &dj.b, &dj.gamma, &oj.c, &oj.d].iter().all(|m| all_finite(m)) {
            return Err(Error::NonFinite {
                stage: k,
                what: "linearization".into(),
            });
        }
        lin.a.push(dj.a);
        lin.b.push(dj.b);
        lin.gamma.push(dj.gamma);
        lin.c.push(oj.c);
        lin.d.push(oj.d);
    }
    Ok(())
}

/// Kalman gains `K̂_1 … K̂_N` and covariances `P̂_0 … P̂_N` of the linearized system.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanSequence {
    /// `gains[k]` is `K̂_{k+1}`.
    pub gains: Vec<DMatrix<f64>>,
    /// `covariances[k]` is `P̂_k`.
    pub covariances: Vec<DMatrix<f64>>,
}

/// One predict/update cycle with unit-covariance noises.
/// Returns `(K̂, P̂⁺)`.
pub fn kalman_step(
    p: &DMatrix<f64>,
    a: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
    stage: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let mut prior = a * p * a.transpose() + gamma * gamma.transpose();
    symmetrize(&mut prior);
    kalman_update(&prior, c, d, stage)
}

/// Measurement update of a prior covariance. Returns `(K̂, P̂⁺)`.
pub fn kalman_update(prior: &DMatrix<f64>, c: &DMatrix<f64>, d: &DMatrix<f64>, stage: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let pct = prior * c.transpose();
    let mut s = c * &pct + d * d.transpose();
    symmetrize(&mut s);
    let gain = right_solve_spd(&pct, &s, stage)?;
    let n = prior.nrows();
    let mut post = (DMatrix::identity(n, n) - &gain * c) * prior;
    symmetrize(&mut post);
    Ok((gain, post))
}

pub fn kalman_recursion(lin: &StageLinearization, p0: &DMatrix<f64>) -> Result<KalmanSequence> {
    lin.check()?;
    let n = lin.horizon();
    if n > 0 && p0.shape() != (lin.n_x(), lin.n_x()) {
        return Err(Error::Dimension(format!("P̂_0 has shape {:?}", p0.shape())));
    }
    let mut seq = KalmanSequence {
        gains: Vec::with_capacity(n),
        covariances: Vec::with_capacity(n + 1),
    };
    seq.covariances.push(crate::linalg::symmetrized(p0.clone()));
    extend_kalman(lin, &mut seq, 0)?;
    Ok(seq)
}

/// Recursion that reuses `base` before stage `from`; `lin` must agree with
/// the linearization behind `base` on stages before `from`.
pub fn kalman_recursion_from(lin: &StageLinearization, base: &KalmanSequence, from: usize) -> Result<KalmanSequence> {
    lin.check()?;
    if from > lin.horizon() || base.gains.len() != lin.horizon() {
        return Err(Error::Dimension("kalman prefix does not match".into()));
    }
    let mut seq = KalmanSequence {
        gains: base.gains[..from].to_vec(),
        covariances: base.covariances[..=from].to_vec(),
    };
    extend_kalman(lin, &mut seq, from)?;
    Ok(seq)
}

fn extend_kalman(lin: &StageLinearization, seq: &mut KalmanSequence, from: usize) -> Result<()> {
    for k in from..lin.horizon() {
        let (gain, post) = kalman_step(&seq.covariances[k], &lin.a[k], &lin.gamma[k], &lin.c[k], &lin.d[k], k + 1)?;
        seq.gains.push(gain);
        seq.covariances.push(post);
    }
    Ok(())
}

/// Nominal controls `ū_0 … ū_{N−1}` and estimate-feedback gains, with `K_0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    controls: Vec<DVector<f64>>,
    /// `gains[k]` is `K_k`; `gains[0]` is always zero.
    gains: Vec<DMatrix<f64>>,
}

impl Policy {
    /// `feedback` holds `K_1 … K_{N−1}`.
    pub fn new(controls: Vec<DVector<f64>>, feedback: Vec<DMatrix<f64>>) -> Result<Self> {
        let n = controls.len();
        if n == 0 {
            if !feedback.is_empty() {
                return Err(Error::Dimension("gains supplied for an empty horizon".into()));
            }
            return Ok(Self {
                controls,
                gains: Vec::new(),
            });
        }
        if feedback.len() != n - 1 {
            return Err(Error::Dimension(format!("expected {} feedback gains, got {}", n - 1, feedback.len())));
        }
        let n_u = controls[0].len();
        if controls.iter().any(|u| u.len() != n_u) {
            return Err(Error::Dimension("controls differ in length".into()));
        }
        let n_x = feedback.first().map(|k| k.ncols()).unwrap_or(0);
        if feedback.iter().any(|k| k.nrows() != n_u || k.ncols() != n_x) {
            return Err(Error::Dimension("feedback gains have inconsistent shapes".into()));
        }
        let mut gains = Vec::with_capacity(n);
        gains.push(DMatrix::zeros(n_u, n_x));
        gains.extend(feedback);
        Ok(Self { controls, gains })
    }

    /// Open-loop policy with every gain zero.
    pub fn open_loop(controls: Vec<DVector<f64>>, n_x: usize) -> Self {
        let n_u = controls.first().map(|u| u.len()).unwrap_or(0);
        let gains = vec![DMatrix::zeros(n_u, n_x); controls.len()];
        Self { controls, gains }
    }

    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn controls(&self) -> &[DVector<f64>] {
        &self.controls
    }

    pub fn controls_mut(&mut self) -> &mut [DVector<f64>] {
        &mut self.controls
    }

    /// `K_0 … K_{N−1}` with `K_0 = 0`.
    pub fn gains(&self) -> &[DMatrix<f64>] {
        &self.gains
    }

    /// `K_1 … K_{N−1}`.
    pub fn feedback(&self) -> &[DMatrix<f64>] {
        if self.gains.is_empty() {
            &self.gains
        } else {
            &self.gains[1..]
        }
    }

    /// Mutable access to `K_1 … K_{N−1}`; `K_0` stays fixed at zero.
    pub fn feedback_mut(&mut self) -> &mut [DMatrix<f64>] {
        if self.gains.is_empty() {
            &mut self.gains
        } else {
            &mut self.gains[1..]
        }
    }

    pub fn gain(&self, k: usize) -> &DMatrix<f64> {
        &self.gains[k]
    }
}

/// Joint covariance `Σ_k` of `(x_k − x̄_k, x̂_k − x_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedCovariance {
    sigma: DMatrix<f64>,
}

impl AugmentedCovariance {
    /// `Σ_0 = [[P̂_0, −P̂_0], [−P̂_0, P̂_0]]`.
    pub fn initial(p0: &DMatrix<f64>) -> Self {
        let n = p0.nrows();
        let mut sigma = DMatrix::zeros(2 * n, 2 * n);
        sigma.view_mut((0, 0), (n, n)).copy_from(p0);
        sigma.view_mut((n, n), (n, n)).copy_from(p0);
        sigma.view_mut((0, n), (n, n)).copy_from(&(-p0));
        sigma.view_mut((n, 0), (n, n)).copy_from(&(-p0));
        symmetrize(&mut sigma);
        Self { sigma }
    }

    pub fn from_matrix(mut sigma: DMatrix<f64>) -> Self {
        symmetrize(&mut sigma);
        Self { sigma }
    }

    pub fn n_x(&self) -> usize {
        self.sigma.nrows() / 2
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// True-state deviation covariance `P_k`.
    pub fn state(&self) -> DMatrix<f64> {
        let n = self.n_x();
        self.sigma.view((0, 0), (n, n)).into_owned()
    }

    /// Estimation-error covariance `P̂_k`.
    pub fn estimation(&self) -> DMatrix<f64> {
        let n = self.n_x();
        self.sigma.view((n, n), (n, n)).into_owned()
    }

    /// Cross term `P̆_k = E[(x̂ − x)(x − x̄)ᵀ]`.
    pub fn cross(&self) -> DMatrix<f64> {
        let n = self.n_x();
        self.sigma.view((n, 0), (n, n)).into_owned()
    }
}

/// `Ã_k` and `Γ̃_k` of the augmented linear system for one stage.
pub fn augmented_stage_matrices(
    lin: &StageLinearization,
    k: usize,
    gain: &DMatrix<f64>,
    kalman_gain: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = lin.n_x();
    let (a, b, gamma, c, d) = (&lin.a[k], &lin.b[k], &lin.gamma[k], &lin.c[k], &lin.d[k]);
    let n_w = gamma.ncols();
    let n_v = d.ncols();
    let bk = b * gain;
    let err = DMatrix::<f64>::identity(n, n) - kalman_gain * c;

    let mut at = DMatrix::zeros(2 * n, 2 * n);
    at.view_mut((0, 0), (n, n)).copy_from(&(a + &bk));
    at.view_mut((0, n), (n, n)).copy_from(&bk);
    at.view_mut((n, n), (n, n)).copy_from(&(&err * a));

    let mut gt = DMatrix::zeros(2 * n, n_w + n_v);
    gt.view_mut((0, 0), (n, n_w)).copy_from(gamma);
    gt.view_mut((n, 0), (n, n_w)).copy_from(&(-(&err * gamma)));
    gt.view_mut((n, n_w), (n, n_v)).copy_from(&(kalman_gain * d));
    (at, gt)
}

/// Gain-independent parts of the augmented system: the estimation-error
/// block `(I − K̂C)A` of `Ã_k` and the noise term `Γ̃_k Γ̃_kᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedTerms {
    estimation: Vec<DMatrix<f64>>,
    noise: Vec<DMatrix<f64>>,
}

impl AugmentedTerms {
    pub fn new(lin: &StageLinearization, kalman_gains: &[DMatrix<f64>]) -> Result<Self> {
        let empty = Self {
            estimation: Vec::new(),
            noise: Vec::new(),
        };
        empty.recompute_from(lin, kalman_gains, 0)
    }

    /// Keeps stages before `from` and recomputes the rest.
    pub fn recompute_from(&self, lin: &StageLinearization, kalman_gains: &[DMatrix<f64>], from: usize) -> Result<Self> {
        lin.check()?;
        let n = lin.horizon();
        if kalman_gains.len() != n || from > self.horizon().min(n) {
            return Err(Error::Dimension(format!("horizon {n} vs kalman gains {}", kalman_gains.len())));
        }
        let n_x = lin.n_x();
        let mut estimation = self.estimation[..from].to_vec();
        let mut noise = self.noise[..from].to_vec();
        for (k, kalman_gain) in kalman_gains.iter().enumerate().take(n).skip(from) {
            let zero_gain = DMatrix::zeros(lin.b[k].ncols(), n_x);
            let (at, gt) = augmented_stage_matrices(lin, k, &zero_gain, kalman_gain);
            estimation.push(at.view((n_x, n_x), (n_x, n_x)).into_owned());
            noise.push(&gt * gt.transpose());
        }
        Ok(Self { estimation, noise })
    }

    pub fn horizon(&self) -> usize {
        self.noise.len()
    }

    /// `Σ_{k+1}` from `Σ_k` under feedback gain `K_k`.
    pub fn step(&self, lin: &StageLinearization, k: usize, gain: &DMatrix<f64>, sigma: &AugmentedCovariance) -> AugmentedCovariance {
        let n = lin.n_x();
        let bk = &lin.b[k] * gain;
        let mut at = DMatrix::zeros(2 * n, 2 * n);
        at.view_mut((0, 0), (n, n)).copy_from(&(&lin.a[k] + &bk));
        at.view_mut((0, n), (n, n)).copy_from(&bk);
        at.view_mut((n, n), (n, n)).copy_from(&self.estimation[k]);
        let next = &at * sigma.matrix() * at.transpose() + &self.noise[k];
        AugmentedCovariance::from_matrix(next)
    }
}

fn check_gains(lin: &StageLinearization, policy: &Policy, n_x: usize) -> Result<()> {
    let n = lin.horizon();
    if policy.horizon() != n {
        return Err(Error::Dimension(format!("horizon {n} vs policy {}", policy.horizon())));
    }
    for k in 0..n {
        if policy.gain(k).shape() != (lin.b[k].ncols(), n_x) {
            return Err(Error::Dimension(format!("feedback gain {k} has shape {:?}", policy.gain(k).shape())));
        }
    }
    Ok(())
}

/// `Σ_0 … Σ_N` from `Σ_{k+1} = Ã_k Σ_k Ã_kᵀ + Γ̃_k Γ̃_kᵀ`.
pub fn propagate_covariance(
    lin: &StageLinearization,
    policy: &Policy,
    kalman_gains: &[DMatrix<f64>],
    p0: &DMatrix<f64>,
) -> Result<Vec<AugmentedCovariance>> {
    let terms = AugmentedTerms::new(lin, kalman_gains)?;
    propagate_with_terms(lin, &terms, policy, p0)
}

/// [`propagate_covariance`] with precomputed gain-independent terms.
pub fn propagate_with_terms(
    lin: &StageLinearization,
    terms: &AugmentedTerms,
    policy: &Policy,
    p0: &DMatrix<f64>,
) -> Result<Vec<AugmentedCovariance>> {
    let n = lin.horizon();
    let n_x = if n > 0 { lin.n_x() } else { p0.nrows() };
    if p0.shape() != (n_x, n_x) {
        return Err(Error::Dimension(format!("P̂_0 has shape {:?}", p0.shape())));
    }
    if terms.horizon() != n {
        return Err(Error::Dimension("augmented terms do not match the linearization".into()));
    }
    check_gains(lin, policy, n_x)?;
    let mut out = Vec::with_capacity(n + 1);
    out.push(AugmentedCovariance::initial(p0));
    for k in 0..n {
        let next = terms.step(lin, k, policy.gain(k), &out[k]);
        out.push(next);
    }
    Ok(out)
}

/// Covariance of `z_k = (x_k, u_k)`: `M Σ_k Mᵀ` with `M = [[I, 0], [K_k, K_k]]`.
pub fn joint_covariance(sigma: &AugmentedCovariance, gain: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = sigma.n_x();
    if gain.ncols() != n {
        return Err(Error::Dimension(format!("gain has {} columns, expected {n}", gain.ncols())));
    }
    let m_u = gain.nrows();
    let mut map = DMatrix::zeros(n + m_u, 2 * n);
    map.view_mut((0, 0), (n, n)).fill_with_identity();
    map.view_mut((n, 0), (m_u, n)).copy_from(gain);
    map.view_mut((n, n), (m_u, n)).copy_from(gain);
    let mut out = &map * sigma.matrix() * map.transpose();
    symmetrize(&mut out);
    Ok(out)
}
