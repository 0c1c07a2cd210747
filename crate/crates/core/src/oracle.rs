//! Direct maximum-likelihood fitting of the Gaussian linear mixed model.
//!
//! The random effects are integrated out in closed form, giving per-cluster
//! marginal covariances V_i = σ² I + Z_i Q Z_i^T. For a fixed relative
//! covariance Q* = Q / σ² both β and σ² have closed-form maximizers, so the
//! numeric search only runs over the log-Cholesky factor of Q*.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{Dataset, ParamState};
use crate::optim;

const MAX_OUTER: usize = 500;
const LOGLIK_TOL: f64 = 1e-8;

/// Σ_i [−½ log det(2π V_i) − ½ (y_i − μ_i)^T V_i^{-1} (y_i − μ_i)].
pub fn marginal_loglik(
    beta0: f64,
    beta: &DVector<f64>,
    sigma2: f64,
    q: &DMatrix<f64>,
    data: &Dataset,
) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::NonPositiveVariance(sigma2));
    }
    let terms: Result<Vec<f64>> = (0..data.n_clusters())
        .into_par_iter()
        .map(|i| {
            let v = marginal_covariance(data, i, sigma2, q);
            let chol = linalg::cholesky(&v, "marginal covariance V_i")?;
            let r = data.y_block(i) - data.x_block(i) * beta - DVector::from_element(v.nrows(), beta0);
            let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            let quad = r.dot(&chol.solve(&r));
            Ok(-0.5 * (v.nrows() as f64 * (2.0 * PI).ln() + logdet + quad))
        })
        .collect();
    Ok(terms?.iter().sum())
}

/// V_i = σ² I + Z_i Q Z_i^T.
pub fn marginal_covariance(data: &Dataset, i: usize, sigma2: f64, q: &DMatrix<f64>) -> DMatrix<f64> {
    let z = data.z_block(i);
    let n = z.nrows();
    DMatrix::identity(n, n) * sigma2 + &z * q * z.transpose()
}

/// Closed-form maximizers of β and σ² for a given relative covariance Q* = Q/σ².
#[derive(Debug, Clone)]
pub struct Profile {
    pub beta0: f64,
    pub beta: DVector<f64>,
    pub sigma2: f64,
    pub loglik: f64,
}

fn design_with_intercept(data: &Dataset, i: usize) -> DMatrix<f64> {
    let x = data.x_block(i);
    let mut out = DMatrix::from_element(x.nrows(), x.ncols() + 1, 1.0);
    out.columns_mut(1, x.ncols()).copy_from(&x);
    out
}

/// GLS estimate of (β0, β) and the ML σ² for relative covariance `q_star`,
/// together with the profiled marginal log-likelihood.
pub fn profile(data: &Dataset, q_star: &DMatrix<f64>) -> Result<Profile> {
    let k = data.p() + 1;
    let parts: Result<Vec<(DMatrix<f64>, DVector<f64>, f64, f64)>> = (0..data.n_clusters())
        .into_par_iter()
        .map(|i| {
            let z = data.z_block(i);
            let n = z.nrows();
            let m = DMatrix::identity(n, n) + &z * q_star * z.transpose();
            let chol = linalg::cholesky(&m, "I + Z_i Q* Z_i^T")?;
            let xt = design_with_intercept(data, i);
            let y = data.y_block(i).into_owned();
            let minv_x = chol.solve(&xt);
            let minv_y = chol.solve(&y);
            let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            Ok((xt.transpose() * minv_x, xt.transpose() * &minv_y, y.dot(&minv_y), logdet))
        })
        .collect();
    let mut a = DMatrix::zeros(k, k);
    let mut b = DVector::zeros(k);
    let mut yy = 0.0;
    let mut logdet = 0.0;
    for (ai, bi, yi, li) in parts? {
        a += ai;
        b += bi;
        yy += yi;
        logdet += li;
    }
    let coef = linalg::cholesky(&linalg::symmetrize(&a), "GLS normal equations")?.solve(&b);
    let n_obs = data.n_obs() as f64;
    let rss = (yy - b.dot(&coef)).max(0.0);
    let sigma2 = rss / n_obs;
    if !(sigma2 > 0.0) {
        return Err(Error::NonPositiveVariance(sigma2));
    }
    let loglik = -0.5 * n_obs * ((2.0 * PI * sigma2).ln() + 1.0) - 0.5 * logdet;
    Ok(Profile {
        beta0: coef[0],
        beta: coef.rows(1, k - 1).into_owned(),
        sigma2,
        loglik,
    })
}

/// BLUPs γ̂_i = Q Z_i^T V_i^{-1} (y_i − μ_i), returned as an n × q matrix.
pub fn blup(data: &Dataset, beta0: f64, beta: &DVector<f64>, sigma2: f64, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut gamma = DMatrix::zeros(data.n_clusters(), data.q());
    for i in 0..data.n_clusters() {
        let v = marginal_covariance(data, i, sigma2, q);
        let r = data.y_block(i) - data.x_block(i) * beta - DVector::from_element(v.nrows(), beta0);
        let w = linalg::cholesky(&v, "marginal covariance V_i")?.solve(&r);
        let g = q * data.z_block(i).transpose() * w;
        gamma.set_row(i, &g.transpose());
    }
    Ok(gamma)
}

#[derive(Debug, Clone)]
pub struct MlFit {
    pub state: ParamState,
    pub loglik: f64,
    pub iterations: usize,
}

/// Lower bound on the log-diagonal of the Cholesky factor, so that searches
/// drifting towards a singular Q* stop on a plateau instead of creeping on.
const LOG_DIAG_MIN: f64 = -18.0;

fn log_cholesky_to_matrix(theta: &[f64], q: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(q, q);
    let mut k = 0;
    for i in 0..q {
        for j in 0..=i {
            l[(i, j)] = if i == j { theta[k].max(LOG_DIAG_MIN).exp() } else { theta[k] };
            k += 1;
        }
    }
    &l * l.transpose()
}

fn matrix_to_log_cholesky(m: &DMatrix<f64>) -> Vec<f64> {
    let q = m.nrows();
    let guarded = m + DMatrix::identity(q, q) * 1e-8;
    let l = nalgebra::Cholesky::new(guarded)
        .map(|c| c.l())
        .unwrap_or_else(|| DMatrix::identity(q, q) * 1e-4);
    let mut theta = Vec::with_capacity(q * (q + 1) / 2);
    for i in 0..q {
        for j in 0..=i {
            theta.push(if i == j { l[(i, j)].ln().max(LOG_DIAG_MIN) } else { l[(i, j)] });
        }
    }
    theta
}

/// A few EM sweeps from moment-based starting values; used to seed the
/// numeric search for q ≥ 2.
fn em_warm_start(data: &Dataset, sweeps: usize) -> Result<DMatrix<f64>> {
    let q = data.q();
    let ols = profile(data, &DMatrix::zeros(q, q))?;
    let mut sigma2 = ols.sigma2 / 2.0;
    let mut qm = DMatrix::identity(q, q) * (ols.sigma2 / 2.0);
    for _ in 0..sweeps {
        let prof = profile(data, &(&qm / sigma2))?;
        let q_inv = linalg::guarded_inverse(&qm)?;
        let mut q_acc = DMatrix::zeros(q, q);
        let mut rss = 0.0;
        for i in 0..data.n_clusters() {
            let z = data.z_block(i);
            let r = data.y_block(i)
                - data.x_block(i) * &prof.beta
                - DVector::from_element(z.nrows(), prof.beta0);
            let f = z.transpose() * &z / sigma2 + &q_inv;
            let f_inv = linalg::spd_inverse(&f, "posterior precision")?;
            let g = &f_inv * z.transpose() * &r / sigma2;
            let e = &r - &z * &g;
            rss += e.norm_squared() + (&z * &f_inv * z.transpose()).trace();
            q_acc += &f_inv + linalg::outer(&g);
        }
        qm = linalg::symmetrize(&(q_acc / data.n_clusters() as f64));
        sigma2 = rss / data.n_obs() as f64;
    }
    Ok(qm / sigma2)
}

/// Maximum-likelihood fit of the full model (fixed effects from `data.x()`,
/// random effects from `data.z()`), with BLUP random effects.
pub fn ml_fit(data: &Dataset) -> Result<MlFit> {
    if data.n_obs() <= data.p() + 1 {
        return Err(Error::Input(format!(
            "ML fit needs more observations ({}) than fixed effects ({})",
            data.n_obs(),
            data.p() + 1
        )));
    }
    let q = data.q();
    let eval = |q_star: &DMatrix<f64>| profile(data, q_star).map(|p| p.loglik).unwrap_or(f64::NEG_INFINITY);

    let (q_star, iterations) = if q == 1 {
        // one-dimensional: scan log Q* then polish, and compare with the Q* = 0 boundary
        let f = |t: f64| eval(&DMatrix::from_element(1, 1, t.exp()));
        let (t, v) = optim::bracketed_max(f, -25.0, 15.0, 160, 1e-12);
        let zero = eval(&DMatrix::zeros(1, 1));
        let qs = if zero >= v { 0.0 } else { t.exp() };
        (DMatrix::from_element(1, 1, qs), 1)
    } else {
        let start = em_warm_start(data, 30)?;
        let mut theta = matrix_to_log_cholesky(&start);
        let objective = |th: &[f64]| -eval(&log_cholesky_to_matrix(th, q));
        let mut best = objective(&theta);
        let mut outer = 0;
        loop {
            outer += 1;
            let res = optim::nelder_mead(&objective, &theta, 0.3, 1e-12, 4000);
            let improvement = best - res.value;
            theta = res.x;
            best = res.value;
            // a restart from the previous optimum that gains nothing ends the search
            if improvement.abs() < LOGLIK_TOL && (res.converged || outer > 1) {
                break;
            }
            if outer >= MAX_OUTER {
                let qm = log_cholesky_to_matrix(&theta, q);
                let prof = profile(data, &qm)?;
                let state = state_from_profile(data, &prof, &qm)?;
                return Err(Error::NoConvergence {
                    iterations: outer,
                    best_loglik: prof.loglik,
                    best: Box::new(state),
                });
            }
        }
        (log_cholesky_to_matrix(&theta, q), outer)
    };

    let prof = profile(data, &q_star)?;
    let state = state_from_profile(data, &prof, &q_star)?;
    Ok(MlFit {
        state,
        loglik: prof.loglik,
        iterations,
    })
}

fn state_from_profile(data: &Dataset, prof: &Profile, q_star: &DMatrix<f64>) -> Result<ParamState> {
    let q = q_star * prof.sigma2;
    let gamma = blup(data, prof.beta0, &prof.beta, prof.sigma2, &q)?;
    Ok(ParamState {
        beta0: prof.beta0,
        beta: prof.beta.clone(),
        gamma,
        sigma2: prof.sigma2,
        q,
    })
}
