//! Cluster-wise k-fold cross-validation and choice of the stopping iteration.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::engine::{boost_fit_with, BoostConfig, BoostTrace};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{build_correction, build_correction_lenient, Dataset, ParamState};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    /// Fold label of every cluster, indexed like the dataset's clusters.
    pub assignment: Vec<usize>,
}

impl FoldPlan {
    pub fn heldout(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == fold).collect()
    }

    pub fn training(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] != fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Seeded shuffle of the clusters followed by round-robin fold assignment.
pub fn partition_clusters(n: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 || k > n {
        return Err(Error::Input(format!("fold count k = {k} must satisfy 2 ≤ k ≤ {n} clusters")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0; n];
    for (pos, &cluster) in order.iter().enumerate() {
        assignment[cluster] = pos % k;
    }
    Ok(FoldPlan { k, assignment })
}

/// Held-out prediction error (1/N_l) r^T (I + Z Q* Z^T)^{-1} r with Q* = Q/σ²
/// and r = y − β0 − Xβ, accumulated cluster by cluster.
pub fn cv_criterion(
    heldout: &Dataset,
    beta0: f64,
    beta: &DVector<f64>,
    q: &DMatrix<f64>,
    sigma2: f64,
) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::NonPositiveVariance(sigma2));
    }
    let q_star = q / sigma2;
    let mut total = 0.0;
    for i in 0..heldout.n_clusters() {
        let z = heldout.z_block(i);
        let r = heldout.y_block(i) - heldout.x_block(i) * beta - DVector::from_element(z.nrows(), beta0);
        let w = DMatrix::identity(z.nrows(), z.nrows()) + z * &q_star * z.transpose();
        let chol = linalg::cholesky(&linalg::symmetrize(&w), "held-out marginal covariance")?;
        total += r.dot(&chol.solve(&r));
    }
    Ok(total / heldout.n_obs() as f64)
}

#[derive(Debug, Clone)]
pub struct CvCurve {
    /// CV value after iterations 1..=m_stop (index 0 is iteration 1).
    pub values: Vec<f64>,
    pub m_star: usize,
}

impl CvCurve {
    /// First minimizer, as a 1-based iteration count.
    pub fn from_values(values: Vec<f64>) -> CvCurve {
        let mut m_star = 1;
        for (i, &v) in values.iter().enumerate() {
            if v < values[m_star - 1] {
                m_star = i + 1;
            }
        }
        CvCurve { values, m_star }
    }
}

#[derive(Debug, Clone)]
pub struct CvResult {
    pub curve: CvCurve,
    pub plan: FoldPlan,
    /// Full-data path; its state at `curve.m_star` is `state`.
    pub trace: BoostTrace,
    pub state: ParamState,
}

fn fold_curve(data: &Dataset, config: &BoostConfig, plan: &FoldPlan, fold: usize) -> Result<Vec<f64>> {
    let train = data.subset_clusters(&plan.training(fold));
    let test = data.subset_clusters(&plan.heldout(fold));
    let cor = if config.correction_enabled {
        let (cor, dropped) = build_correction_lenient(&train)?;
        if !dropped.is_empty() {
            warn!(
                "fold {}: cluster-constant columns degenerate on the training clusters, dropped from the correction: {}",
                fold + 1,
                dropped.join(", ")
            );
        }
        Some(cor)
    } else {
        None
    };
    let trace = boost_fit_with(&train, config, cor.as_ref())?;
    (1..=config.m_stop)
        .map(|m| {
            let row = trace.beta_path.row(m);
            let beta = row.columns(1, row.len() - 1).transpose();
            cv_criterion(&test, row[0], &beta, &trace.q_path[m], trace.sigma2_path[m])
        })
        .collect()
}

/// CV curve over iterations 1..=m_stop from the given plan, averaged over folds.
pub fn cv_curve(data: &Dataset, config: &BoostConfig, plan: &FoldPlan) -> Result<CvCurve> {
    if config.m_stop == 0 {
        return Err(Error::Input("cross-validation needs m_stop ≥ 1".into()));
    }
    let curves: Result<Vec<Vec<f64>>> = (0..plan.k)
        .into_par_iter()
        .map(|fold| fold_curve(data, config, plan, fold))
        .collect();
    let curves = curves?;
    let values = (0..config.m_stop)
        .map(|m| curves.iter().map(|c| c[m]).sum::<f64>() / plan.k as f64)
        .collect();
    Ok(CvCurve::from_values(values))
}

/// Chooses m* by k-fold CV and returns the full-data refit stopped at m*.
pub fn cv_select(data: &Dataset, config: &BoostConfig, k: usize, seed: u64) -> Result<CvResult> {
    config.validate()?;
    let plan = partition_clusters(data.n_clusters(), k, seed)?;
    let full_cor = if config.correction_enabled {
        Some(build_correction(data)?)
    } else {
        None
    };
    let curve = cv_curve(data, config, &plan)?;
    let refit_cfg = BoostConfig {
        m_stop: curve.m_star,
        ..config.clone()
    };
    let trace = boost_fit_with(data, &refit_cfg, full_cor.as_ref())?;
    let state = trace.final_state();
    Ok(CvResult {
        curve,
        plan,
        trace,
        state,
    })
}
