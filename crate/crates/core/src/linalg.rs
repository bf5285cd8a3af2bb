//! Small dense linear-algebra helpers shared by the filter and propagation code.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Replace `m` by `(m + mᵀ) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub fn symmetrized(mut m: DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&mut m);
    m
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let sym = symmetrized(m.clone());
    sym.symmetric_eigenvalues().min()
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn all_finite_vec(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

const JITTER_START: f64 = 1e-12;
const JITTER_MAX: f64 = 1e-6;

/// Solve `X · S = rhs` for `X` where `S` is symmetric positive definite,
/// i.e. returns `rhs · S⁻¹`.
///
/// The Cholesky factorization is retried with `1e-12·I`, escalated by ×10 up
/// to `1e-6·I`, before giving up.
pub fn right_solve_spd(rhs: &DMatrix<f64>, s: &DMatrix<f64>, stage: usize) -> Result<DMatrix<f64>> {
    let chol = cholesky_with_jitter(s).ok_or(Error::SingularInnovation { stage })?;
    // X S = R  <=>  S Xᵀ = Rᵀ
    let xt = chol.solve(&rhs.transpose());
    if !all_finite(&xt) {
        return Err(Error::SingularInnovation { stage });
    }
    Ok(xt.transpose())
}

pub fn cholesky_with_jitter(s: &DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if !all_finite(s) {
        return None;
    }
    if let Some(c) = s.clone().cholesky() {
        return Some(c);
    }
    let n = s.nrows();
    let mut jitter = JITTER_START;
    while jitter <= JITTER_MAX * (1.0 + 1e-9) {
        let shifted = s + DMatrix::<f64>::identity(n, n) * jitter;
        if let Some(c) = shifted.cholesky() {
            return Some(c);
        }
        jitter *= 10.0;
    }
    None
}

/// Lower Cholesky factor of a PSD matrix, tolerating a singular input by jitter.
/// Returns zeros for an all-zero matrix.
pub fn psd_factor(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if m.iter().all(|v| *v == 0.0) {
        return Some(DMatrix::zeros(m.nrows(), m.ncols()));
    }
    cholesky_with_jitter(m).map(|c| c.l())
}

pub fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    // tr(A B) = Σ_ij A_ij B_ji
    let mut acc = 0.0;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetrize_averages_off_diagonal() {
        let mut m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 4.0, 3.0]);
        symmetrize(&mut m);
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 3.0, 3.0]));
    }

    #[test]
    fn jitter_rescues_semidefinite_matrix() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(cholesky_with_jitter(&s).is_some());
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(cholesky_with_jitter(&bad).is_none());
    }

    #[test]
    fn right_solve_matches_inverse() {
        let s = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let r = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let x = right_solve_spd(&r, &s, 0).unwrap();
        let expect = &r * s.try_inverse().unwrap();
        assert!((x - expect).abs().max() < 1e-14);
    }
}
