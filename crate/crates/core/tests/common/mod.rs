#![allow(dead_code)]

use std::path::PathBuf;

use boostlmm::engine::BoostTrace;
use boostlmm::io::{ingest_csv, ModelSpec};
use boostlmm::model::CorrectionOperator;
use boostlmm::Dataset;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Orthodont with the dummy coded as female (male reference).
pub fn orthodont() -> Dataset {
    let mut spec = ModelSpec {
        response: "distance".into(),
        cluster: "Subject".into(),
        fixed: vec!["Sex".into(), "age".into()],
        ..ModelSpec::default()
    };
    spec.reference.insert("Sex".into(), "Male".into());
    ingest_csv(&fixture("orthodont.csv"), &spec).unwrap().data
}

/// Largest |X̃_c^T γ_{·1}| and |mean γ_{·s}| (s ≥ 2) over every iteration of a path.
pub fn orthogonality(trace: &BoostTrace, cor: &CorrectionOperator) -> (f64, f64) {
    let mut intercept: f64 = 0.0;
    let mut slopes: f64 = 0.0;
    // row 0 holds the uncorrected starting values
    for g in trace.gamma_path.iter().skip(1) {
        let proj = cor.xc_tilde.transpose() * g.column(0);
        intercept = intercept.max(proj.amax());
        for s in 1..g.ncols() {
            slopes = slopes.max(g.column(s).mean().abs());
        }
    }
    (intercept, slopes)
}

/// Mean random intercept of clusters with dummy 1 minus those with dummy 0.
pub fn group_gap(data: &Dataset, gamma: &nalgebra::DMatrix<f64>, column: usize) -> f64 {
    let v = data.cluster_constant_values();
    let k = data.cluster_constant().iter().position(|&c| c == column).unwrap();
    let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..data.n_clusters() {
        if v[(i, k)] == 1.0 {
            s1 += gamma[(i, 0)];
            n1 += 1.0;
        } else {
            s0 += gamma[(i, 0)];
            n0 += 1.0;
        }
    }
    s1 / n1 - s0 / n0
}
