//! Linear mixed model data, parameter state and likelihood quantities.
//!
//! Observations are stored in long format, grouped contiguously by cluster.
//! The random-effects design `z` always carries the constant-one column first,
//! so column 0 of `gamma` is the random intercept.

use std::cmp::Ordering;
use std::f64::consts::PI;
use std::ops::Range;

use nalgebra::{DMatrix, DMatrixView, DVector, DVectorView};

use crate::error::{Error, Result};
use crate::linalg;

/// Absolute tolerance on the within-cluster range of a column flagged as cluster-constant.
pub const CONSTANCY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DVector<f64>,
    x: DMatrix<f64>,
    x_names: Vec<String>,
    z: DMatrix<f64>,
    z_names: Vec<String>,
    cluster_labels: Vec<String>,
    offsets: Vec<usize>,
    cluster_constant: Vec<usize>,
}

fn compare_labels(numeric: bool) -> impl Fn(&String, &String) -> Ordering {
    move |a, b| {
        if numeric {
            let (fa, fb) = (a.parse::<f64>().unwrap(), b.parse::<f64>().unwrap());
            fa.partial_cmp(&fb).unwrap_or(Ordering::Equal)
        } else {
            a.cmp(b)
        }
    }
}

impl Dataset {
    /// Builds a dataset from unsorted long-format rows.
    ///
    /// Rows are stably sorted by cluster label (numerically when every label
    /// parses as a number). The first column of `z` must be the constant one.
    /// Cluster-constant fixed-effect columns are detected automatically.
    pub fn new(
        y: Vec<f64>,
        cluster: Vec<String>,
        x: DMatrix<f64>,
        x_names: Vec<String>,
        z: DMatrix<f64>,
        z_names: Vec<String>,
    ) -> Result<Self> {
        let n_obs = y.len();
        if n_obs == 0 {
            return Err(Error::Input("dataset is empty".into()));
        }
        if cluster.len() != n_obs || x.nrows() != n_obs || z.nrows() != n_obs {
            return Err(Error::Input(format!(
                "row count mismatch: y={}, cluster={}, X={}, Z={}",
                n_obs,
                cluster.len(),
                x.nrows(),
                z.nrows()
            )));
        }
        if x_names.len() != x.ncols() || z_names.len() != z.ncols() {
            return Err(Error::Input("column names do not match design widths".into()));
        }
        if z.ncols() == 0 {
            return Err(Error::Input("random-effects design needs an intercept column".into()));
        }
        if y.iter().chain(x.iter()).chain(z.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite value in response or design".into()));
        }

        let numeric = cluster.iter().all(|c| c.parse::<f64>().is_ok());
        let cmp = compare_labels(numeric);
        let mut order: Vec<usize> = (0..n_obs).collect();
        order.sort_by(|&a, &b| cmp(&cluster[a], &cluster[b]));

        let y = DVector::from_iterator(n_obs, order.iter().map(|&i| y[i]));
        let x = x.select_rows(&order);
        let z = z.select_rows(&order);
        let mut cluster_labels = Vec::new();
        let mut offsets = Vec::new();
        for (row, &i) in order.iter().enumerate() {
            if cluster_labels.last() != Some(&cluster[i]) {
                cluster_labels.push(cluster[i].clone());
                offsets.push(row);
            }
        }
        offsets.push(n_obs);
        if cluster_labels.len() < 2 {
            return Err(Error::Input("mixed model requires ≥ 2 clusters".into()));
        }
        if z.column(0).iter().any(|&v| v != 1.0) {
            return Err(Error::Input(
                "first random-effects column must be the constant intercept".into(),
            ));
        }

        let mut data = Dataset {
            y,
            x,
            x_names,
            z,
            z_names,
            cluster_labels,
            offsets,
            cluster_constant: Vec::new(),
        };
        data.cluster_constant = detect_cluster_constant(&data);
        Ok(data)
    }

    /// Random-intercept dataset: `z` is the single ones column.
    pub fn random_intercept(
        y: Vec<f64>,
        cluster: Vec<String>,
        x: DMatrix<f64>,
        x_names: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        Self::new(
            y,
            cluster,
            x,
            x_names,
            DMatrix::from_element(n, 1, 1.0),
            vec!["(Intercept)".into()],
        )
    }

    /// Overrides the detected cluster-constant set. Every listed column must
    /// actually be constant within clusters.
    pub fn with_cluster_constant(mut self, mut columns: Vec<usize>) -> Result<Self> {
        columns.sort_unstable();
        columns.dedup();
        for &c in &columns {
            if c >= self.p() {
                return Err(Error::Input(format!("cluster-constant index {c} out of range")));
            }
            if !self.column_is_cluster_constant(c) {
                return Err(Error::Input(format!(
                    "column `{}` varies within clusters",
                    self.x_names[c]
                )));
            }
        }
        self.cluster_constant = columns;
        Ok(self)
    }

    fn column_is_cluster_constant(&self, col: usize) -> bool {
        (0..self.n_clusters()).all(|i| {
            let r = self.cluster_range(i);
            let (lo, hi) = self.x.column(col).rows(r.start, r.len()).iter().fold(
                (f64::INFINITY, f64::NEG_INFINITY),
                |(lo, hi), &v| (lo.min(v), hi.max(v)),
            );
            hi - lo <= CONSTANCY_TOL
        })
    }

    /// Restriction to the given clusters (indices into this dataset), keeping
    /// the cluster-constant flags of the parent.
    pub fn subset_clusters(&self, clusters: &[usize]) -> Dataset {
        let mut rows = Vec::new();
        let mut offsets = vec![0];
        let mut labels = Vec::with_capacity(clusters.len());
        let mut sorted = clusters.to_vec();
        sorted.sort_unstable();
        for &c in &sorted {
            rows.extend(self.cluster_range(c));
            offsets.push(rows.len());
            labels.push(self.cluster_labels[c].clone());
        }
        Dataset {
            y: DVector::from_iterator(rows.len(), rows.iter().map(|&r| self.y[r])),
            x: self.x.select_rows(&rows),
            x_names: self.x_names.clone(),
            z: self.z.select_rows(&rows),
            z_names: self.z_names.clone(),
            cluster_labels: labels,
            offsets,
            cluster_constant: self.cluster_constant.clone(),
        }
    }

    /// Replaces the fixed-effect design (same rows, same clusters).
    pub fn with_fixed_design(&self, x: DMatrix<f64>, x_names: Vec<String>) -> Result<Dataset> {
        if x.nrows() != self.n_obs() || x_names.len() != x.ncols() {
            return Err(Error::Input("replacement design has wrong shape".into()));
        }
        let mut out = self.clone();
        out.x = x;
        out.x_names = x_names;
        out.cluster_constant = detect_cluster_constant(&out);
        Ok(out)
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }
    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }
    pub fn x_names(&self) -> &[String] {
        &self.x_names
    }
    pub fn z_names(&self) -> &[String] {
        &self.z_names
    }
    pub fn cluster_labels(&self) -> &[String] {
        &self.cluster_labels
    }
    pub fn cluster_constant(&self) -> &[usize] {
        &self.cluster_constant
    }
    pub fn n_obs(&self) -> usize {
        self.y.len()
    }
    pub fn n_clusters(&self) -> usize {
        self.cluster_labels.len()
    }
    pub fn p(&self) -> usize {
        self.x.ncols()
    }
    pub fn q(&self) -> usize {
        self.z.ncols()
    }
    pub fn cluster_range(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }
    pub fn cluster_size(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }
    pub fn y_block(&self, i: usize) -> DVectorView<'_, f64> {
        let r = self.cluster_range(i);
        self.y.rows(r.start, r.len())
    }
    pub fn x_block(&self, i: usize) -> DMatrixView<'_, f64> {
        let r = self.cluster_range(i);
        self.x.rows(r.start, r.len())
    }
    pub fn z_block(&self, i: usize) -> DMatrixView<'_, f64> {
        let r = self.cluster_range(i);
        self.z.rows(r.start, r.len())
    }
    /// Cluster index of every observation.
    pub fn cluster_of_rows(&self) -> Vec<usize> {
        (0..self.n_clusters())
            .flat_map(|i| std::iter::repeat(i).take(self.cluster_size(i)))
            .collect()
    }

    /// n × p_c matrix of per-cluster values of the cluster-constant columns.
    pub fn cluster_constant_values(&self) -> DMatrix<f64> {
        self.cluster_constant_values_for(&self.cluster_constant)
    }
}

/// Columns whose within-cluster range is at most `CONSTANCY_TOL` in every cluster.
pub fn detect_cluster_constant(data: &Dataset) -> Vec<usize> {
    (0..data.p())
        .filter(|&c| data.column_is_cluster_constant(c))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamState {
    pub beta0: f64,
    pub beta: DVector<f64>,
    /// n × q, row i holds the random effects of cluster i.
    pub gamma: DMatrix<f64>,
    pub sigma2: f64,
    pub q: DMatrix<f64>,
}

impl ParamState {
    pub fn zeros(data: &Dataset) -> Self {
        ParamState {
            beta0: 0.0,
            beta: DVector::zeros(data.p()),
            gamma: DMatrix::zeros(data.n_clusters(), data.q()),
            sigma2: 1.0,
            q: DMatrix::identity(data.q(), data.q()),
        }
    }

    pub fn check(&self, data: &Dataset) -> Result<()> {
        if !(self.sigma2 > 0.0) {
            return Err(Error::NonPositiveVariance(self.sigma2));
        }
        if self.beta.len() != data.p()
            || self.gamma.nrows() != data.n_clusters()
            || self.gamma.ncols() != data.q()
            || self.q.nrows() != data.q()
            || self.q.ncols() != data.q()
        {
            return Err(Error::Input("parameter state does not match dataset shape".into()));
        }
        Ok(())
    }

    /// β0·1 + Xβ.
    pub fn fixed_predictor(&self, data: &Dataset) -> DVector<f64> {
        data.x() * &self.beta + DVector::from_element(data.n_obs(), self.beta0)
    }

    /// β0·1 + Xβ + Zγ.
    pub fn linear_predictor(&self, data: &Dataset) -> DVector<f64> {
        let mut eta = self.fixed_predictor(data);
        for i in 0..data.n_clusters() {
            let r = data.cluster_range(i);
            let contrib = data.z_block(i) * self.gamma.row(i).transpose();
            let mut block = eta.rows_mut(r.start, r.len());
            block += &contrib;
        }
        eta
    }

    pub fn residuals(&self, data: &Dataset) -> DVector<f64> {
        data.y() - self.linear_predictor(data)
    }
}

/// Σ_i log f(y_i | ϑ, φ) for the Gaussian model error.
pub fn conditional_loglik(state: &ParamState, data: &Dataset) -> Result<f64> {
    if !(state.sigma2 > 0.0) {
        return Err(Error::NonPositiveVariance(state.sigma2));
    }
    let rss = state.residuals(data).norm_squared();
    Ok(gaussian_loglik(rss, data.n_obs(), state.sigma2))
}

pub(crate) fn gaussian_loglik(rss: f64, n_obs: usize, sigma2: f64) -> f64 {
    -0.5 * n_obs as f64 * (2.0 * PI * sigma2).ln() - rss / (2.0 * sigma2)
}

/// Conditional log-likelihood minus ½ Σ γ_i^T Q^{-1} γ_i.
pub fn penalized_loglik(state: &ParamState, data: &Dataset) -> Result<f64> {
    let cond = conditional_loglik(state, data)?;
    Ok(cond - random_effects_penalty(state)?)
}

pub fn random_effects_penalty(state: &ParamState) -> Result<f64> {
    let q_inv = linalg::guarded_inverse(&state.q)?;
    let g = &state.gamma;
    Ok(0.5 * (g * &q_inv).component_mul(g).sum())
}

/// Gradient of the penalized log-likelihood with respect to (β0, β, γ).
#[derive(Debug, Clone)]
pub struct Score {
    pub beta0: f64,
    pub beta: DVector<f64>,
    pub gamma: DMatrix<f64>,
}

pub fn penalized_score(state: &ParamState, data: &Dataset) -> Result<Score> {
    state.check(data)?;
    let res = state.residuals(data) / state.sigma2;
    let q_inv = linalg::guarded_inverse(&state.q)?;
    let mut gamma = DMatrix::zeros(data.n_clusters(), data.q());
    for i in 0..data.n_clusters() {
        let r = data.cluster_range(i);
        let s = data.z_block(i).transpose() * res.rows(r.start, r.len())
            - &q_inv * state.gamma.row(i).transpose();
        gamma.set_row(i, &s.transpose());
    }
    Ok(Score {
        beta0: res.sum(),
        beta: data.x().transpose() * &res,
        gamma,
    })
}

/// Orthogonal projection machinery for the random intercepts against the
/// cluster-constant covariates (with a leading ones column).
#[derive(Debug, Clone)]
pub struct CorrectionOperator {
    /// n × (p_c + 1): (1, X_c).
    pub xc_tilde: DMatrix<f64>,
    /// (p_c + 1) × n: (X̃_c^T X̃_c)^{-1} X̃_c^T.
    pub xcor: DMatrix<f64>,
    /// Fixed-effect column indices used in `xc_tilde` (after the ones column).
    pub columns: Vec<usize>,
}

impl CorrectionOperator {
    fn from_columns(data: &Dataset, columns: Vec<usize>) -> Result<Self> {
        let values = data.cluster_constant_values_for(&columns);
        let n = data.n_clusters();
        let mut xc_tilde = DMatrix::from_element(n, columns.len() + 1, 1.0);
        xc_tilde.columns_mut(1, columns.len()).copy_from(&values);
        let offending = collinear_columns(&xc_tilde);
        if !offending.is_empty() {
            return Err(Error::SingularCorrection {
                columns: offending
                    .iter()
                    .map(|&k| data.x_names()[columns[k - 1]].clone())
                    .collect(),
            });
        }
        let gram = xc_tilde.transpose() * &xc_tilde;
        let xcor = linalg::cholesky(&gram, "cluster-constant Gram matrix")?
            .solve(&xc_tilde.transpose());
        Ok(CorrectionOperator {
            xc_tilde,
            xcor,
            columns,
        })
    }

    /// v − X̃_c (Xcor v): the component of `v` orthogonal to span(1, X_c).
    pub fn project_out(&self, v: &DVector<f64>) -> DVector<f64> {
        v - &self.xc_tilde * (&self.xcor * v)
    }
}

impl Dataset {
    fn cluster_constant_values_for(&self, columns: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_clusters(), columns.len(), |i, k| {
            self.x[(self.offsets[i], columns[k])]
        })
    }
}

/// Indices (into the columns of `m`) that are numerically in the span of
/// the preceding columns. Column 0 is never reported.
fn collinear_columns(m: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut offending = Vec::new();
    for k in 0..m.ncols() {
        let col = m.column(k).into_owned();
        let norm = col.norm();
        let mut v = col;
        // two passes of Gram-Schmidt for stability
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&v);
                v -= b * c;
            }
        }
        let rn = v.norm();
        if norm == 0.0 || rn <= 1e-10 * norm.max(1.0) {
            if k > 0 {
                offending.push(k);
            }
        } else {
            basis.push(v / rn);
        }
    }
    offending
}

/// Correction operator over the dataset's flagged cluster-constant columns.
pub fn build_correction(data: &Dataset) -> Result<CorrectionOperator> {
    CorrectionOperator::from_columns(data, data.cluster_constant().to_vec())
}

/// Like [`build_correction`], but drops columns that make X̃_c rank deficient
/// (e.g. a dummy that is constant across a cross-validation training fold)
/// and reports their names.
pub fn build_correction_lenient(data: &Dataset) -> Result<(CorrectionOperator, Vec<String>)> {
    let mut columns = data.cluster_constant().to_vec();
    let mut dropped = Vec::new();
    loop {
        match CorrectionOperator::from_columns(data, columns.clone()) {
            Ok(op) => return Ok((op, dropped)),
            Err(Error::SingularCorrection { columns: names }) => {
                let name = &names[0];
                let pos = columns
                    .iter()
                    .position(|&c| &data.x_names()[c] == name)
                    .expect("offending column is part of the correction design");
                columns.remove(pos);
                dropped.push(name.clone());
            }
            Err(e) => return Err(e),
        }
    }
}
