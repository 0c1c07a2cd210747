//! Simulation designs, evaluation metrics and the study runner.

use std::time::Instant;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::cv::cv_select;
use crate::engine::{BoostConfig, StartMode};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{Dataset, ParamState};
use crate::oracle;

/// Informative coefficients β1..β4; the first two belong to cluster-constant covariates.
pub const INFORMATIVE_BETA: [f64; 4] = [2.0, 4.0, 3.0, 5.0];
pub const TRUE_INTERCEPT: f64 = 1.0;
pub const SLOPE_CORRELATION: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimDesign {
    pub n_clusters: usize,
    pub obs_per_cluster: usize,
    pub p: usize,
    pub tau: f64,
    pub sigma: f64,
    /// Random intercept plus random slopes on covariates 3 and 4.
    pub slopes: bool,
    pub replicates: usize,
    pub seed: u64,
}

impl SimDesign {
    pub fn new(p: usize, tau: f64, slopes: bool) -> Self {
        SimDesign {
            n_clusters: 50,
            obs_per_cluster: 10,
            p,
            tau,
            sigma: 0.4,
            slopes,
            replicates: 20,
            seed: 1,
        }
    }

    pub fn name(&self) -> &'static str {
        if self.slopes {
            "slopes"
        } else {
            "intercept"
        }
    }

    pub fn q(&self) -> usize {
        if self.slopes {
            3
        } else {
            1
        }
    }

    /// τ² on the diagonal, 0.6·τ² off the diagonal.
    pub fn true_q(&self) -> DMatrix<f64> {
        let t2 = self.tau * self.tau;
        DMatrix::from_fn(self.q(), self.q(), |a, b| if a == b { t2 } else { SLOPE_CORRELATION * t2 })
    }

    pub fn true_beta(&self) -> DVector<f64> {
        DVector::from_fn(self.p, |r, _| INFORMATIVE_BETA.get(r).copied().unwrap_or(0.0))
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < INFORMATIVE_BETA.len() {
            return Err(Error::Input(format!("design needs p ≥ 4, got {}", self.p)));
        }
        if self.n_clusters < 2 || self.obs_per_cluster == 0 || !(self.tau >= 0.0) || !(self.sigma > 0.0) {
            return Err(Error::Input("invalid simulation design".into()));
        }
        Ok(())
    }

    fn stream(&self, replicate: usize) -> u64 {
        // FNV-1a over the design coordinates and replicate index
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let fields = [
            self.slopes as u64,
            self.p as u64,
            self.tau.to_bits(),
            self.sigma.to_bits(),
            self.n_clusters as u64,
            self.obs_per_cluster as u64,
            replicate as u64,
        ];
        for f in fields {
            for b in f.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    pub fn rng(&self, replicate: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream(replicate));
        rng
    }
}

/// Draws one replicate. Covariates 1 and 2 are drawn once per cluster.
pub fn gen_dataset(design: &SimDesign, replicate: usize) -> Result<(Dataset, ParamState)> {
    design.validate()?;
    let mut rng = design.rng(replicate);
    let (n, ni, p, q) = (design.n_clusters, design.obs_per_cluster, design.p, design.q());
    let big_n = n * ni;
    let q_true = design.true_q();
    let chol = linalg::cholesky(&linalg::guard_pd(&q_true), "design covariance")?.l();
    let beta = design.true_beta();

    let mut x = DMatrix::zeros(big_n, p);
    let mut z = DMatrix::zeros(big_n, q);
    let mut gamma = DMatrix::zeros(n, q);
    let mut y = Vec::with_capacity(big_n);
    let mut labels = Vec::with_capacity(big_n);
    for i in 0..n {
        let c1: f64 = rng.sample(StandardNormal);
        let c2: f64 = rng.sample(StandardNormal);
        let e = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
        let g = if design.tau > 0.0 { &chol * e } else { DVector::zeros(q) };
        gamma.set_row(i, &g.transpose());
        for j in 0..ni {
            let row = i * ni + j;
            x[(row, 0)] = c1;
            x[(row, 1)] = c2;
            for r in 2..p {
                x[(row, r)] = rng.sample(StandardNormal);
            }
            z[(row, 0)] = 1.0;
            if design.slopes {
                z[(row, 1)] = x[(row, 2)];
                z[(row, 2)] = x[(row, 3)];
            }
            let eps: f64 = rng.sample(StandardNormal);
            let fixed = TRUE_INTERCEPT + x.row(row).dot(&beta.transpose());
            let random = z.row(row).dot(&g.transpose());
            y.push(fixed + random + design.sigma * eps);
            labels.push(format!("{i}"));
        }
    }
    let x_names = (1..=p).map(|r| format!("x{r}")).collect();
    let z_names = if design.slopes {
        vec!["(Intercept)".to_string(), "x3".into(), "x4".into()]
    } else {
        vec!["(Intercept)".to_string()]
    };
    let data = Dataset::new(y, labels, x, x_names, z, z_names)?.with_cluster_constant(vec![0, 1])?;
    let truth = ParamState {
        beta0: TRUE_INTERCEPT,
        beta,
        gamma,
        sigma2: design.sigma * design.sigma,
        q: q_true,
    };
    Ok((data, truth))
}

/// Share of non-informative covariates with a nonzero estimate.
pub fn false_positives(beta_hat: &DVector<f64>, informative: &[usize]) -> f64 {
    let noise: Vec<usize> = (0..beta_hat.len()).filter(|r| !informative.contains(r)).collect();
    if noise.is_empty() {
        return 0.0;
    }
    noise.iter().filter(|&&r| beta_hat[r] != 0.0).count() as f64 / noise.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Method {
    BoostA,
    BoostB,
    MlOracle,
    Legacy,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::BoostA, Method::BoostB, Method::MlOracle, Method::Legacy];

    pub fn name(self) -> &'static str {
        match self {
            Method::BoostA => "boostLMM_a",
            Method::BoostB => "boostLMM_b",
            Method::MlOracle => "ml_oracle",
            Method::Legacy => "legacy_nocorrection",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s || format!("{m:?}").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Input(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimMetrics {
    pub mse_beta: f64,
    pub mse_tau: f64,
    pub mse_q: f64,
    pub false_positive_rate: f64,
    pub m_star: Option<usize>,
    pub wall_time_seconds: f64,
}

/// Metrics of a fitted state against the truth; β includes the intercept and
/// the τ error is taken on the variance scale of the random intercept.
pub fn metrics(fit: &ParamState, truth: &ParamState) -> SimMetrics {
    let d0 = fit.beta0 - truth.beta0;
    let mse_beta = d0 * d0 + (&fit.beta - &truth.beta).norm_squared();
    let dt = fit.q[(0, 0)] - truth.q[(0, 0)];
    let informative: Vec<usize> = (0..truth.beta.len()).filter(|&r| truth.beta[r] != 0.0).collect();
    SimMetrics {
        mse_beta,
        mse_tau: dt * dt,
        mse_q: linalg::frobenius_sq(&fit.q, &truth.q),
        false_positive_rate: false_positives(&fit.beta, &informative),
        m_star: None,
        wall_time_seconds: 0.0,
    }
}

#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub methods: Vec<Method>,
    pub m_stop: usize,
    pub k: usize,
    pub nu: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            methods: Method::ALL.to_vec(),
            m_stop: 1000,
            k: 10,
            nu: 0.1,
        }
    }
}

impl StudyConfig {
    pub fn boost_config(&self, method: Method, seed: u64) -> BoostConfig {
        let base = match method {
            Method::Legacy => BoostConfig::legacy(),
            Method::BoostB => BoostConfig {
                start_mode: StartMode::MlIntercept,
                ..BoostConfig::default()
            },
            _ => BoostConfig::default(),
        };
        BoostConfig {
            nu: self.nu,
            m_stop: self.m_stop,
            seed,
            ..base
        }
    }
}

#[derive(Debug, Clone)]
pub struct MethodFit {
    pub state: ParamState,
    pub m_star: Option<usize>,
}

/// Fits one method to one dataset; boosting variants are stopped by CV.
pub fn fit_method(data: &Dataset, method: Method, study: &StudyConfig, seed: u64) -> Result<MethodFit> {
    match method {
        Method::MlOracle => {
            if data.p() + 1 >= data.n_obs() {
                return Err(Error::Input("ML fit needs p + 1 < N".into()));
            }
            Ok(MethodFit {
                state: oracle::ml_fit(data)?.state,
                m_star: None,
            })
        }
        _ => {
            let cfg = study.boost_config(method, seed);
            let res = cv_select(data, &cfg, study.k, seed)?;
            Ok(MethodFit {
                state: res.state,
                m_star: Some(res.curve.m_star),
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReplicateRecord {
    pub design: usize,
    pub replicate: usize,
    pub method: Method,
    pub outcome: std::result::Result<(SimMetrics, ParamState), String>,
    /// Correlation of the fitted random intercepts with the first cluster-constant covariate.
    pub ranef_cor_x1: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellSummary {
    pub design: String,
    pub tau: f64,
    pub p: usize,
    pub method: String,
    pub mse_beta: f64,
    pub mse_tau: f64,
    #[serde(rename = "mse_Q")]
    pub mse_q: f64,
    pub fp_rate: f64,
    pub m_star: f64,
    pub time_s: f64,
    pub failures: usize,
}

#[derive(Debug, Clone)]
pub struct StudyResult {
    pub cells: Vec<CellSummary>,
    pub records: Vec<ReplicateRecord>,
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (linalg::mean(a), linalg::mean(b));
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn run_replicate(designs: &[SimDesign], study: &StudyConfig, d: usize, rep: usize) -> Vec<ReplicateRecord> {
    let design = &designs[d];
    let generated = gen_dataset(design, rep);
    study
        .methods
        .iter()
        .filter(|&&m| !(m == Method::MlOracle && design.p + 1 >= design.n_clusters * design.obs_per_cluster))
        .map(|&method| {
            let start = Instant::now();
            let fitted = generated.as_ref().map_err(|e| e.to_string()).and_then(|(data, truth)| {
                let seed = design.rng(rep).gen::<u64>();
                let fit = fit_method(data, method, study, seed).map_err(|e| e.to_string())?;
                let mut m = metrics(&fit.state, truth);
                m.m_star = fit.m_star;
                m.wall_time_seconds = start.elapsed().as_secs_f64();
                let x1 = data.cluster_constant_values();
                let cor = pearson(fit.state.gamma.column(0).as_slice(), x1.column(0).as_slice());
                Ok((m, fit.state, cor))
            });
            if let Err(e) = &fitted {
                warn!("{} p={} τ={} replicate {rep} {}: {e}", design.name(), design.p, design.tau, method.name());
            }
            let ranef_cor_x1 = fitted.as_ref().ok().map(|t| t.2);
            ReplicateRecord {
                design: d,
                replicate: rep,
                method,
                outcome: fitted.map(|(m, s, _)| (m, s)),
                ranef_cor_x1,
            }
        })
        .collect()
}

/// Runs every method on every replicate of every design. Replicates run in
/// parallel with per-replicate seeds; failures are counted per cell.
pub fn run_study(designs: &[SimDesign], study: &StudyConfig) -> Result<StudyResult> {
    for d in designs {
        d.validate()?;
    }
    let jobs: Vec<(usize, usize)> = designs
        .iter()
        .enumerate()
        .flat_map(|(d, des)| (0..des.replicates).map(move |r| (d, r)))
        .collect();
    let records: Vec<ReplicateRecord> = jobs
        .par_iter()
        .flat_map_iter(|&(d, r)| run_replicate(designs, study, d, r))
        .collect();

    let mut cells = Vec::new();
    for (d, design) in designs.iter().enumerate() {
        for &method in &study.methods {
            let cell: Vec<&ReplicateRecord> = records.iter().filter(|r| r.design == d && r.method == method).collect();
            if cell.is_empty() {
                continue;
            }
            let ok: Vec<&SimMetrics> = cell.iter().filter_map(|r| r.outcome.as_ref().ok().map(|o| &o.0)).collect();
            let avg = |f: &dyn Fn(&SimMetrics) -> f64| {
                if ok.is_empty() {
                    f64::NAN
                } else {
                    ok.iter().map(|m| f(m)).sum::<f64>() / ok.len() as f64
                }
            };
            cells.push(CellSummary {
                design: design.name().to_string(),
                tau: design.tau,
                p: design.p,
                method: method.name().to_string(),
                mse_beta: avg(&|m| m.mse_beta),
                mse_tau: avg(&|m| m.mse_tau),
                mse_q: avg(&|m| m.mse_q),
                fp_rate: avg(&|m| m.false_positive_rate),
                m_star: avg(&|m| m.m_star.map_or(f64::NAN, |v| v as f64)),
                time_s: avg(&|m| m.wall_time_seconds),
                failures: cell.len() - ok.len(),
            });
        }
    }
    Ok(StudyResult { cells, records })
}

pub fn write_cells_csv<W: std::io::Write>(cells: &[CellSummary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for c in cells {
        w.serialize(c)?;
    }
    w.flush()?;
    Ok(())
}
