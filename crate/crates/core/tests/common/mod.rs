#![allow(dead_code)]

use dualsmpc::model::LinearModel;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn normal_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let l = normal_matrix(rng, n, n, 1.0);
    &l * l.transpose() / n as f64 + DMatrix::identity(n, n) * floor
}

fn rank(m: &DMatrix<f64>) -> usize {
    m.clone().svd(false, false).rank(1e-8)
}

pub fn controllable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    let mut blocks = b.clone();
    let mut ak = b.clone();
    for _ in 1..n {
        ak = a * ak;
        blocks = DMatrix::from_fn(n, blocks.ncols() + ak.ncols(), |i, j| {
            if j < blocks.ncols() {
                blocks[(i, j)]
            } else {
                ak[(i, j - blocks.ncols())]
            }
        });
    }
    rank(&blocks) == n
}

pub fn observable(a: &DMatrix<f64>, c: &DMatrix<f64>) -> bool {
    controllable(&a.transpose(), &c.transpose())
}

/// `(A, B, Γ, C, D)`.
pub type SystemMatrices = (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>);

/// System matrices with `A` scaled to spectral radius below 1.2,
/// redrawn until controllable and observable.
pub fn random_system(
    rng: &mut ChaCha8Rng,
    n_x: usize,
    n_u: usize,
    n_y: usize,
) -> SystemMatrices {
    loop {
        let mut a = normal_matrix(rng, n_x, n_x, 1.0);
        let radius = a.clone().complex_eigenvalues().iter().map(|e| e.norm()).fold(0.0, f64::max);
        if radius > 1.2 {
            a *= 1.2 / radius;
        }
        let b = normal_matrix(rng, n_x, n_u, 1.0);
        let gamma = normal_matrix(rng, n_x, n_x, 0.2);
        let c = normal_matrix(rng, n_y, n_x, 1.0);
        let d = normal_matrix(rng, n_y, n_y, 0.3) + DMatrix::identity(n_y, n_y) * 0.2;
        if controllable(&a, &b) && observable(&a, &c) {
            return (a, b, gamma, c, d);
        }
    }
}

pub struct LqInstance {
    pub model: LinearModel,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub qn: DMatrix<f64>,
}

impl LqInstance {
    pub fn oracle(&self, x0: &DVector<f64>, p0: &DMatrix<f64>) -> LqgOracle {
        let m = &self.model;
        lqg_oracle(&m.a, &m.b, &m.gamma, &m.c, &m.d, &self.q, &self.r, &self.qn, x0, p0, dualsmpc::SystemModel::horizon(m))
    }
}

pub fn random_lq(rng: &mut ChaCha8Rng, n_x: usize, n_u: usize, n_y: usize, horizon: usize) -> LqInstance {
    let (a, b, gamma, c, d) = random_system(rng, n_x, n_u, n_y);
    let q = random_spd(rng, n_x, 0.5);
    let r = random_spd(rng, n_u, 0.5);
    let qn = random_spd(rng, n_x, 0.5);
    let model = LinearModel::with_lq_cost(a, b, gamma, c, d, horizon, &q, &r, &qn).unwrap();
    LqInstance { model, q, r, qn }
}

/// Textbook Kalman filter covariances `P̂_0 … P̂_N` with unit noise covariances.
pub fn kalman_oracle(
    a: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
    p0: &DMatrix<f64>,
    horizon: usize,
) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
    let n = a.nrows();
    let mut covs = vec![p0.clone()];
    let mut gains = Vec::new();
    for k in 0..horizon {
        let prior = a * &covs[k] * a.transpose() + gamma * gamma.transpose();
        let s = c * &prior * c.transpose() + d * d.transpose();
        let gain = &prior * c.transpose() * s.try_inverse().unwrap();
        let post = (DMatrix::identity(n, n) - &gain * c) * &prior;
        gains.push(gain);
        covs.push((&post + post.transpose()) * 0.5);
    }
    (gains, covs)
}

/// Finite-horizon LQG solution of `min E[Σ ½xᵀQx + ½uᵀRu + ½x_NᵀQ_N x_N]`.
pub struct LqgOracle {
    /// Feedback `u_k = −L_k x̂_k`.
    pub l: Vec<DMatrix<f64>>,
    /// Noise-free optimal controls from `x̂_0`.
    pub controls: Vec<DVector<f64>>,
    pub optimal_cost: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn lqg_oracle(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    qn: &DMatrix<f64>,
    x0: &DVector<f64>,
    p0: &DMatrix<f64>,
    horizon: usize,
) -> LqgOracle {
    let mut s = vec![DMatrix::zeros(0, 0); horizon + 1];
    let mut l = vec![DMatrix::zeros(0, 0); horizon];
    s[horizon] = qn.clone();
    for k in (0..horizon).rev() {
        let gram = r + b.transpose() * &s[k + 1] * b;
        let lk = gram.clone().try_inverse().unwrap() * b.transpose() * &s[k + 1] * a;
        let next = q + a.transpose() * &s[k + 1] * (a - b * &lk);
        s[k] = (&next + next.transpose()) * 0.5;
        l[k] = lk;
    }
    let (_, p_hat) = kalman_oracle(a, gamma, c, d, p0, horizon);
    let mut cost = 0.5 * x0.dot(&(&s[0] * x0)) + 0.5 * (&s[0] * p0).trace();
    for k in 0..horizon {
        cost += 0.5 * (&s[k + 1] * gamma * gamma.transpose()).trace();
        let gram = r + b.transpose() * &s[k + 1] * b;
        cost += 0.5 * (l[k].transpose() * gram * &l[k] * &p_hat[k]).trace();
    }
    let mut controls = Vec::with_capacity(horizon);
    let mut x = x0.clone();
    for lk in &l {
        let u = -(lk * &x);
        x = a * &x + b * &u;
        controls.push(u);
    }
    LqgOracle {
        l,
        controls,
        optimal_cost: cost,
    }
}
