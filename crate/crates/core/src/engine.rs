//! The boosting iteration.
//!
//! Every iteration runs, in order:
//!
//! 1. a component-wise fixed-effects step: for each covariate `r` a Fisher
//!    scoring update of `(β0, β_r)` is computed, the candidate with the highest
//!    unpenalized log-likelihood after its full update is selected, and only
//!    that candidate receives the weak update scaled by `ν`;
//! 2. a separate, weak Fisher-scoring step for the random effects, solved
//!    cluster by cluster, followed by the correction that projects the random
//!    intercepts onto the orthogonal complement of `(1, X_c)` and centres the
//!    random slopes;
//! 3. approximate EM updates of `Q` and the residual variance `σ²`.
//!
//! [`RanefScheme::Joint`] swaps steps 1-2 for the older scheme in which the
//! random effects are re-estimated inside every fixed-effect candidate with a
//! full step. Combined with `correction_enabled = false` and the ML starting
//! values it reproduces the failure where random intercepts soak up the
//! effects of cluster-constant covariates.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{self, gaussian_loglik, CorrectionOperator, Dataset, ParamState};
use crate::optim;
use crate::oracle;

/// Candidate or cluster counts from which the inner loops run in parallel.
const PAR_MIN_LEN: usize = 64;
/// Floor applied when the residual vector vanishes.
pub const SIGMA2_FLOOR: f64 = 1e-10;
const START_Q_DIAG: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartMode {
    /// β0 = mean(y), σ² = Var(y), γ = 0, Q = 0.1·I.
    ZeroRanef,
    /// Intercept and random effects from an ML fit of y = β0 + Zγ + ε.
    MlIntercept,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RanefScheme {
    /// Separate weak random-effects step after the fixed-effects step.
    Disentangled,
    /// Random effects re-estimated jointly inside every candidate with a full
    /// step; the candidate coefficient is shrunk by a ridge penalty instead.
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sigma2Rule {
    /// ‖y − η‖² / N, the maximizer of the conditional likelihood.
    Conditional,
    /// Adds the posterior-curvature trace Σ tr(Z_i F_i^{-1} Z_i^T) / N (full EM).
    Em,
}

#[derive(Debug, Clone)]
pub struct BoostConfig {
    pub nu: f64,
    /// Step length of the random-effects update; `None` means `nu`.
    pub nu_ran: Option<f64>,
    pub m_stop: usize,
    pub start_mode: StartMode,
    pub correction_enabled: bool,
    pub ranef_scheme: RanefScheme,
    pub sigma2_rule: Sigma2Rule,
    /// Cross-check the closed-form σ² against golden-section search every iteration.
    pub check_sigma2: bool,
    pub seed: u64,
}

impl Default for BoostConfig {
    fn default() -> Self {
        BoostConfig {
            nu: 0.1,
            nu_ran: None,
            m_stop: 1000,
            start_mode: StartMode::ZeroRanef,
            correction_enabled: true,
            ranef_scheme: RanefScheme::Disentangled,
            sigma2_rule: Sigma2Rule::Conditional,
            check_sigma2: false,
            seed: 0,
        }
    }
}

impl BoostConfig {
    /// Uncorrected joint scheme with ML starting values.
    pub fn legacy() -> Self {
        BoostConfig {
            start_mode: StartMode::MlIntercept,
            correction_enabled: false,
            ranef_scheme: RanefScheme::Joint,
            ..BoostConfig::default()
        }
    }

    pub fn nu_ran(&self) -> f64 {
        self.nu_ran.unwrap_or(self.nu)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.nu <= 1.0) {
            return Err(Error::Input(format!("step length ν must lie in (0, 1], got {}", self.nu)));
        }
        let nr = self.nu_ran();
        if !(nr > 0.0 && nr <= 1.0) {
            return Err(Error::Input(format!(
                "random-effects step length must lie in (0, 1], got {nr}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateUpdate {
    pub r: usize,
    /// (u_0, u_r): intercept and coefficient update.
    pub u: (f64, f64),
    /// Unpenalized log-likelihood after the full trial update.
    pub candidate_loglik: f64,
}

#[derive(Debug, Clone)]
pub struct FixedStep {
    pub state: ParamState,
    pub selected: usize,
    pub candidates: Vec<CandidateUpdate>,
    /// Candidates skipped because their Fisher matrix was singular.
    pub skipped: Vec<usize>,
}

/// Starting values for boosting. β is always zero.
pub fn init_state(data: &Dataset, config: &BoostConfig) -> Result<ParamState> {
    let y = data.y().as_slice();
    let variant_a = || -> Result<ParamState> {
        let sigma2 = linalg::sample_variance(y);
        if !(sigma2 > 0.0) {
            return Err(Error::NonPositiveVariance(sigma2));
        }
        Ok(ParamState {
            beta0: linalg::mean(y),
            beta: DVector::zeros(data.p()),
            gamma: DMatrix::zeros(data.n_clusters(), data.q()),
            sigma2,
            q: DMatrix::identity(data.q(), data.q()) * START_Q_DIAG,
        })
    };
    match config.start_mode {
        StartMode::ZeroRanef => variant_a(),
        StartMode::MlIntercept => {
            let intercept_only = data.with_fixed_design(
                DMatrix::zeros(data.n_obs(), 0),
                Vec::new(),
            )?;
            match oracle::ml_fit(&intercept_only) {
                Ok(fit) => Ok(ParamState {
                    beta0: fit.state.beta0,
                    beta: DVector::zeros(data.p()),
                    gamma: fit.state.gamma,
                    sigma2: fit.state.sigma2,
                    q: linalg::guard_pd(&fit.state.q),
                }),
                Err(e) => {
                    warn!("intercept-only ML start failed ({e}); falling back to zero random effects");
                    variant_a()
                }
            }
        }
    }
}

fn select_best(candidates: &[CandidateUpdate]) -> Option<&CandidateUpdate> {
    // strict comparison keeps the smallest index on exact ties
    candidates.iter().fold(None, |best: Option<&CandidateUpdate>, c| match best {
        Some(b) if c.candidate_loglik > b.candidate_loglik => Some(c),
        None => Some(c),
        keep => keep,
    })
}

/// Component-wise fixed-effects step with the weak update of the winner.
pub fn fixed_effects_step(state: &ParamState, data: &Dataset, config: &BoostConfig) -> Result<FixedStep> {
    state.check(data)?;
    let res = state.residuals(data);
    let n = data.n_obs() as f64;
    let sum_res = res.sum();
    let rss = res.norm_squared();
    let x = data.x();

    let eval = |r: usize| -> Option<CandidateUpdate> {
        let col = x.column(r);
        let sx = col.sum();
        let sxx = col.norm_squared();
        let sxr = col.dot(&res);
        // F_r = σ^{-2} X̃_r^T X̃_r and s_r = σ^{-2} X̃_r^T (y − η); σ² cancels in u_r.
        let det = n * sxx - sx * sx;
        if !(det > 1e-12 * n * sxx.max(f64::MIN_POSITIVE)) {
            return None;
        }
        let u0 = (sxx * sum_res - sx * sxr) / det;
        let ur = (n * sxr - sx * sum_res) / det;
        let trial_rss = (rss - (u0 * sum_res + ur * sxr)).max(0.0);
        Some(CandidateUpdate {
            r,
            u: (u0, ur),
            candidate_loglik: gaussian_loglik(trial_rss, data.n_obs(), state.sigma2),
        })
    };
    let evaluated: Vec<Option<CandidateUpdate>> = if data.p() >= PAR_MIN_LEN {
        (0..data.p()).into_par_iter().with_min_len(16).map(eval).collect()
    } else {
        (0..data.p()).map(eval).collect()
    };
    finish_fixed_step(state, data, config, evaluated, false)
}

fn finish_fixed_step(
    state: &ParamState,
    data: &Dataset,
    config: &BoostConfig,
    evaluated: Vec<Option<CandidateUpdate>>,
    full_step: bool,
) -> Result<FixedStep> {
    let skipped: Vec<usize> = (0..data.p()).filter(|&r| evaluated[r].is_none()).collect();
    let candidates: Vec<CandidateUpdate> = evaluated.into_iter().flatten().collect();
    let best = select_best(&candidates).ok_or(Error::NoCandidates)?.clone();
    let step = if full_step { 1.0 } else { config.nu };
    let mut next = state.clone();
    next.beta0 += step * best.u.0;
    next.beta[best.r] += step * best.u.1;
    Ok(FixedStep {
        state: next,
        selected: best.r,
        candidates,
        skipped,
    })
}

/// Weak Fisher-scoring update of the random effects, one q × q solve per cluster.
pub fn random_effects_update(state: &ParamState, data: &Dataset, config: &BoostConfig) -> Result<DMatrix<f64>> {
    let q_inv = linalg::guarded_inverse(&state.q)?;
    let res = state.residuals(data);
    let nu = config.nu_ran();
    let solve = |i: usize| -> Result<DVector<f64>> {
        let z = data.z_block(i);
        let r = data.cluster_range(i);
        let gamma_i = state.gamma.row(i).transpose();
        let f = z.transpose() * z / state.sigma2 + &q_inv;
        let s = z.transpose() * res.rows(r.start, r.len()) / state.sigma2 - &q_inv * &gamma_i;
        let step = linalg::cholesky(&f, "random-effects Fisher block F_i")?.solve(&s);
        Ok(gamma_i + step * nu)
    };
    let rows: Result<Vec<DVector<f64>>> = if data.n_clusters() >= PAR_MIN_LEN {
        (0..data.n_clusters()).into_par_iter().with_min_len(16).map(solve).collect()
    } else {
        (0..data.n_clusters()).map(solve).collect()
    };
    let mut out = DMatrix::zeros(data.n_clusters(), data.q());
    for (i, g) in rows?.into_iter().enumerate() {
        out.set_row(i, &g.transpose());
    }
    Ok(out)
}

/// Random intercepts projected off span(1, X_c); slopes mean-centred.
pub fn correct_random_effects(gamma_tilde: &DMatrix<f64>, cor: &CorrectionOperator) -> DMatrix<f64> {
    let mut out = gamma_tilde.clone();
    let intercept = out.column(0).into_owned();
    out.set_column(0, &cor.project_out(&intercept));
    for s in 1..out.ncols() {
        let m = out.column(s).mean();
        out.column_mut(s).add_scalar_mut(-m);
    }
    out
}

/// Posterior curvature inverses F_i^{-1}, F_i = σ^{-2} Z_i^T Z_i + Q^{-1}.
pub fn posterior_curvatures(state: &ParamState, data: &Dataset) -> Result<Vec<DMatrix<f64>>> {
    let q_inv = linalg::guarded_inverse(&state.q)?;
    (0..data.n_clusters())
        .map(|i| {
            let z = data.z_block(i);
            let f = z.transpose() * z / state.sigma2 + &q_inv;
            linalg::spd_inverse(&f, "random-effects Fisher block F_i")
        })
        .collect()
}

fn q_from_curvatures(state: &ParamState, curv: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n = curv.len();
    let mut acc = DMatrix::zeros(state.q.nrows(), state.q.ncols());
    for (i, f_inv) in curv.iter().enumerate() {
        let g = state.gamma.row(i).transpose();
        acc += f_inv + linalg::outer(&g);
    }
    linalg::symmetrize(&(acc / n as f64))
}

/// Approximate EM update Q̂ = (1/n) Σ (F_i^{-1} + γ̂_i γ̂_i^T).
pub fn update_q(state: &ParamState, data: &Dataset) -> Result<DMatrix<f64>> {
    let curv = posterior_curvatures(state, data)?;
    Ok(q_from_curvatures(state, &curv))
}

/// Closed-form maximizer ‖y − η‖²/N of the conditional likelihood in σ².
pub fn update_sigma2(state: &ParamState, data: &Dataset) -> Result<f64> {
    let rss = state.residuals(data).norm_squared();
    Ok(floor_sigma2(rss / data.n_obs() as f64))
}

fn floor_sigma2(v: f64) -> f64 {
    if v > SIGMA2_FLOOR {
        v
    } else {
        warn!("residual variance collapsed to {v:e}; using floor {SIGMA2_FLOOR:e}");
        SIGMA2_FLOOR
    }
}

/// Golden-section maximization of the conditional likelihood over
/// σ² ∈ (1e-8, 10·Var(y)).
pub fn sigma2_by_search(state: &ParamState, data: &Dataset) -> f64 {
    let rss = state.residuals(data).norm_squared();
    let upper = 10.0 * linalg::sample_variance(data.y().as_slice());
    optim::golden_section_max(|s2| gaussian_loglik(rss, data.n_obs(), s2), 1e-8, upper, 1e-12).0
}

#[derive(Debug, Clone)]
pub struct BoostTrace {
    /// (m + 1) × (p + 1); column 0 is the intercept, row 0 the starting values.
    pub beta_path: DMatrix<f64>,
    /// Selected component (0-based) per iteration.
    pub selected: Vec<usize>,
    pub sigma2_path: Vec<f64>,
    pub q_path: Vec<DMatrix<f64>>,
    pub gamma_path: Vec<DMatrix<f64>>,
    pub penloglik_path: Vec<f64>,
}

impl BoostTrace {
    pub fn iterations(&self) -> usize {
        self.selected.len()
    }

    pub fn state_at(&self, m: usize) -> ParamState {
        let row = self.beta_path.row(m);
        ParamState {
            beta0: row[0],
            beta: row.columns(1, row.len() - 1).transpose().into_owned(),
            gamma: self.gamma_path[m].clone(),
            sigma2: self.sigma2_path[m],
            q: self.q_path[m].clone(),
        }
    }

    pub fn final_state(&self) -> ParamState {
        self.state_at(self.iterations())
    }

    fn push(&mut self, state: &ParamState, data: &Dataset) -> Result<()> {
        let m = self.sigma2_path.len();
        let mut row = Vec::with_capacity(data.p() + 1);
        row.push(state.beta0);
        row.extend(state.beta.iter());
        self.beta_path.row_mut(m).copy_from_slice(&row);
        self.sigma2_path.push(state.sigma2);
        self.q_path.push(state.q.clone());
        self.gamma_path.push(state.gamma.clone());
        self.penloglik_path.push(model::penalized_loglik(state, data)?);
        Ok(())
    }
}

/// Full boosting path of `config.m_stop` iterations with the correction built
/// from the dataset's cluster-constant columns. `m_stop = 0` returns only the
/// starting values.
pub fn boost_fit(data: &Dataset, config: &BoostConfig) -> Result<BoostTrace> {
    let cor = if config.correction_enabled {
        Some(model::build_correction(data)?)
    } else {
        None
    };
    boost_fit_with(data, config, cor.as_ref())
}

/// As [`boost_fit`] with an explicit correction operator (`None` disables it).
pub fn boost_fit_with(
    data: &Dataset,
    config: &BoostConfig,
    cor: Option<&CorrectionOperator>,
) -> Result<BoostTrace> {
    config.validate()?;
    let mut state = init_state(data, config)?;
    let mut trace = BoostTrace {
        beta_path: DMatrix::zeros(config.m_stop + 1, data.p() + 1),
        selected: Vec::with_capacity(config.m_stop),
        sigma2_path: Vec::with_capacity(config.m_stop + 1),
        q_path: Vec::with_capacity(config.m_stop + 1),
        gamma_path: Vec::with_capacity(config.m_stop + 1),
        penloglik_path: Vec::with_capacity(config.m_stop + 1),
    };
    trace.push(&state, data)?;
    for m in 1..=config.m_stop {
        let (next, selected) = iterate(&state, data, config, cor, m == 1).map_err(|e| e.at_iteration(m))?;
        state = next;
        trace.selected.push(selected);
        trace.push(&state, data).map_err(|e| e.at_iteration(m))?;
    }
    Ok(trace)
}

/// One complete boosting iteration; returns the new state and selected component.
pub fn iterate(
    state: &ParamState,
    data: &Dataset,
    config: &BoostConfig,
    cor: Option<&CorrectionOperator>,
    report_skipped: bool,
) -> Result<(ParamState, usize)> {
    let step = match config.ranef_scheme {
        RanefScheme::Disentangled => {
            let step = fixed_effects_step(state, data, config)?;
            let mut next = step.state.clone();
            next.gamma = random_effects_update(&next, data, config)?;
            FixedStep { state: next, ..step }
        }
        RanefScheme::Joint => joint_step(state, data, config)?,
    };
    if report_skipped && !step.skipped.is_empty() {
        let names: Vec<&str> = step.skipped.iter().map(|&r| data.x_names()[r].as_str()).collect();
        warn!("skipping degenerate covariates: {}", names.join(", "));
    }
    let mut next = step.state;
    if let Some(cor) = cor {
        next.gamma = correct_random_effects(&next.gamma, cor);
    }
    let curv = posterior_curvatures(&next, data)?;
    let q_new = q_from_curvatures(&next, &curv);
    let sigma2 = match config.sigma2_rule {
        Sigma2Rule::Conditional => update_sigma2(&next, data)?,
        Sigma2Rule::Em => {
            let rss = next.residuals(data).norm_squared();
            let trace: f64 = curv
                .iter()
                .enumerate()
                .map(|(i, f_inv)| {
                    let z = data.z_block(i);
                    (z.transpose() * z).component_mul(f_inv).sum()
                })
                .sum();
            floor_sigma2((rss + trace) / data.n_obs() as f64)
        }
    };
    if config.check_sigma2 && config.sigma2_rule == Sigma2Rule::Conditional {
        let searched = sigma2_by_search(&next, data);
        if ((searched - sigma2) / sigma2).abs() > 1e-6 {
            warn!("closed-form σ² {sigma2} disagrees with golden-section search {searched}");
        }
    }
    next.q = q_new;
    next.sigma2 = sigma2;
    debug!("selected {} σ²={:.6}", data.x_names()[step.selected], sigma2);
    Ok((next, step.selected))
}

/// Per-candidate joint Fisher step over (β0, β_r, γ) with a ridge on β_r and
/// the Q^{-1} penalty on γ; the winner receives the full update.
fn joint_step(state: &ParamState, data: &Dataset, config: &BoostConfig) -> Result<FixedStep> {
    state.check(data)?;
    let s2 = state.sigma2;
    let q_inv = linalg::guarded_inverse(&state.q)?;
    let res = state.residuals(data);
    let n_clusters = data.n_clusters();
    let qd = data.q();

    // r-independent pieces: G_i^{-1} and w_i = G_i^{-1} s_γi
    let mut g_inv = Vec::with_capacity(n_clusters);
    let mut w = Vec::with_capacity(n_clusters);
    let mut z_ones = Vec::with_capacity(n_clusters);
    for i in 0..n_clusters {
        let z = data.z_block(i);
        let r = data.cluster_range(i);
        let g = z.transpose() * z / s2 + &q_inv;
        let gi = linalg::spd_inverse(&g, "joint random-effects block")?;
        let s = z.transpose() * res.rows(r.start, r.len()) / s2 - &q_inv * state.gamma.row(i).transpose();
        w.push(&gi * s);
        g_inv.push(gi);
        z_ones.push(DVector::from_iterator(qd, z.column_iter().map(|c| c.sum())));
    }
    let n = data.n_obs() as f64;
    let lambda_scale = 1.0 / config.nu - 1.0;

    let eval = |r: usize| -> Option<(CandidateUpdate, DMatrix<f64>)> {
        let col = data.x().column(r);
        let sx = col.sum();
        let sxx = col.norm_squared();
        if !(n * sxx - sx * sx > 1e-12 * n * sxx.max(f64::MIN_POSITIVE)) {
            return None;
        }
        let lambda = lambda_scale * sxx / s2;
        let mut schur = Matrix2::new(n / s2, sx / s2, sx / s2, sxx / s2 + lambda);
        let mut rhs = Vector2::new(res.sum() / s2, col.dot(&res) / s2);
        let mut c_blocks = Vec::with_capacity(n_clusters);
        for i in 0..n_clusters {
            let z = data.z_block(i);
            let r = data.cluster_range(i);
            let ztx = z.transpose() * col.rows(r.start, r.len());
            let mut c = DMatrix::zeros(qd, 2);
            c.set_column(0, &(&z_ones[i] / s2));
            c.set_column(1, &(ztx / s2));
            let gc = &g_inv[i] * &c;
            let ctgc = c.transpose() * &gc;
            let ctw = c.transpose() * &w[i];
            schur -= Matrix2::new(ctgc[(0, 0)], ctgc[(0, 1)], ctgc[(1, 0)], ctgc[(1, 1)]);
            rhs -= Vector2::new(ctw[0], ctw[1]);
            c_blocks.push(gc);
        }
        let ua = schur.lu().solve(&rhs)?;
        let ua_dyn = DVector::from_vec(vec![ua[0], ua[1]]);
        let mut u_gamma = DMatrix::zeros(n_clusters, qd);
        let mut trial_rss = 0.0;
        for i in 0..n_clusters {
            let ug = &w[i] - &c_blocks[i] * &ua_dyn;
            let z = data.z_block(i);
            let rr = data.cluster_range(i);
            let fitted = z * &ug;
            for (k, row) in rr.clone().enumerate() {
                let e = res[row] - ua[0] - ua[1] * col[row] - fitted[k];
                trial_rss += e * e;
            }
            u_gamma.set_row(i, &ug.transpose());
        }
        Some((
            CandidateUpdate {
                r,
                u: (ua[0], ua[1]),
                candidate_loglik: gaussian_loglik(trial_rss, data.n_obs(), s2),
            },
            u_gamma,
        ))
    };
    let evaluated: Vec<Option<(CandidateUpdate, DMatrix<f64>)>> = if data.p() >= PAR_MIN_LEN {
        (0..data.p()).into_par_iter().with_min_len(8).map(eval).collect()
    } else {
        (0..data.p()).map(eval).collect()
    };
    let mut gamma_updates: Vec<Option<DMatrix<f64>>> = Vec::with_capacity(data.p());
    let mut cands = Vec::with_capacity(data.p());
    for e in evaluated {
        match e {
            Some((c, g)) => {
                cands.push(Some(c));
                gamma_updates.push(Some(g));
            }
            None => {
                cands.push(None);
                gamma_updates.push(None);
            }
        }
    }
    let mut step = finish_fixed_step(state, data, config, cands, true)?;
    let ug = gamma_updates[step.selected].take().expect("selected candidate has an update");
    step.state.gamma += ug;
    Ok(step)
}
