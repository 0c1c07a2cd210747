//! Small dense helpers shared by the likelihood, engine and oracle code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Eigenvalue floor below which a covariance matrix receives a ridge before inversion.
pub const PD_FLOOR: f64 = 1e-10;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Applies the `PD_FLOOR` ridge when the smallest eigenvalue falls below it.
pub fn guard_pd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let s = symmetrize(m);
    if min_eigenvalue(&s) < PD_FLOOR {
        let k = s.nrows();
        s + DMatrix::identity(k, k) * PD_FLOOR
    } else {
        s
    }
}

pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

/// Inverse of a covariance matrix after the positive-definiteness guard.
pub fn guarded_inverse(q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let guarded = guard_pd(q);
    Ok(symmetrize(&cholesky(&guarded, "random-effects covariance Q")?.inverse()))
}

pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Ok(symmetrize(&cholesky(m, what)?.inverse()))
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample variance with denominator `len - 1`.
pub fn sample_variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
}

pub fn frobenius_sq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).iter().map(|x| x * x).sum()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn outer(v: &DVector<f64>) -> DMatrix<f64> {
    v * v.transpose()
}
