//! CSV ingestion, model specification and export of fitted results.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::cv::CvCurve;
use crate::engine::BoostTrace;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{Dataset, ParamState};

const MISSING: [&str; 5] = ["", "NA", "NaN", "nan", "."];

/// Which columns of a CSV form the model.
#[derive(Debug, Clone, Default)]
pub struct ModelSpec {
    pub response: String,
    pub cluster: String,
    pub fixed: Vec<String>,
    /// Columns whose square enters as an extra fixed effect named `col^2`.
    pub square: Vec<String>,
    pub random_slopes: Vec<String>,
    /// Reference level per categorical column (default: first level in lexicographic order).
    pub reference: HashMap<String, String>,
    /// Explicit cluster-constant fixed-effect columns (by design name); `None` detects them.
    pub cluster_constant: Option<Vec<String>>,
    pub standardize: bool,
}

/// Column centring and scaling applied to the fixed-effect design.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaling {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Scaling {
    /// Coefficients on the original column scale.
    pub fn back_transform(&self, beta0: f64, beta: &DVector<f64>) -> (f64, DVector<f64>) {
        let raw = DVector::from_fn(beta.len(), |r, _| beta[r] / self.scale[r]);
        let shift: f64 = (0..beta.len()).map(|r| raw[r] * self.center[r]).sum();
        (beta0 - shift, raw)
    }
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub data: Dataset,
    pub scaling: Option<Scaling>,
    pub dropped_rows: usize,
}

fn parse_num(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

fn is_missing(s: &str) -> bool {
    MISSING.contains(&s.trim())
}

/// Reads a headed CSV and builds the mixed-model dataset described by `spec`.
pub fn ingest_csv(path: &Path, spec: &ModelSpec) -> Result<Ingested> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let records: Vec<csv::StringRecord> = reader.records().collect::<std::result::Result<_, _>>()?;
    ingest_records(&headers, &records, spec)
}

pub fn ingest_records(headers: &[String], records: &[csv::StringRecord], spec: &ModelSpec) -> Result<Ingested> {
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let y_col = col(&spec.response)?;
    let c_col = col(&spec.cluster)?;
    let fixed_cols: Vec<usize> = spec.fixed.iter().map(|n| col(n)).collect::<Result<_>>()?;
    let square_cols: Vec<usize> = spec.square.iter().map(|n| col(n)).collect::<Result<_>>()?;
    let slope_cols: Vec<usize> = spec.random_slopes.iter().map(|n| col(n)).collect::<Result<_>>()?;
    for name in spec.reference.keys() {
        if !spec.fixed.contains(name) {
            return Err(Error::Input(format!("reference level given for `{name}`, which is not a fixed effect")));
        }
    }

    let mut used: BTreeSet<usize> = [y_col, c_col].into_iter().collect();
    used.extend(fixed_cols.iter().chain(&square_cols).chain(&slope_cols));
    let kept: Vec<&csv::StringRecord> = records
        .iter()
        .filter(|r| used.iter().all(|&c| r.get(c).map_or(false, |v| !is_missing(v))))
        .collect();
    let dropped_rows = records.len() - kept.len();
    if dropped_rows > 0 {
        warn!("dropped {dropped_rows} rows with missing values in model columns");
    }
    if kept.is_empty() {
        return Err(Error::Input("no complete rows in data".into()));
    }
    let field = |r: &csv::StringRecord, c: usize| r.get(c).unwrap_or("").trim().to_string();

    let y: Vec<f64> = kept
        .iter()
        .map(|r| {
            parse_num(&field(r, y_col))
                .ok_or_else(|| Error::Input(format!("response `{}` has non-numeric value `{}`", spec.response, field(r, y_col))))
        })
        .collect::<Result<_>>()?;
    let cluster: Vec<String> = kept.iter().map(|r| field(r, c_col)).collect();

    let numeric_column = |c: usize, name: &str| -> Result<Vec<f64>> {
        kept.iter()
            .map(|r| {
                parse_num(&field(r, c))
                    .ok_or_else(|| Error::Input(format!("column `{name}` has non-numeric value `{}`", field(r, c))))
            })
            .collect()
    };

    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut names: Vec<String> = Vec::new();
    for (&c, name) in fixed_cols.iter().zip(&spec.fixed) {
        let raw: Vec<String> = kept.iter().map(|r| field(r, c)).collect();
        if raw.iter().all(|v| parse_num(v).is_some()) {
            columns.push(raw.iter().map(|v| parse_num(v).unwrap()).collect());
            names.push(name.clone());
            continue;
        }
        let levels: BTreeSet<&str> = raw.iter().map(String::as_str).collect();
        let reference = match spec.reference.get(name) {
            Some(level) if levels.contains(level.as_str()) => level.clone(),
            Some(level) => {
                return Err(Error::Input(format!("reference level `{level}` does not occur in `{name}`")))
            }
            None => levels.iter().next().unwrap().to_string(),
        };
        for level in levels.iter().filter(|l| **l != reference) {
            columns.push(raw.iter().map(|v| if v == level { 1.0 } else { 0.0 }).collect());
            names.push(format!("{name}{level}"));
        }
    }
    for (&c, name) in square_cols.iter().zip(&spec.square) {
        columns.push(numeric_column(c, name)?.into_iter().map(|v| v * v).collect());
        names.push(format!("{name}^2"));
    }
    let n_obs = y.len();

    let scaling = if spec.standardize {
        let mut center = Vec::new();
        let mut scale = Vec::new();
        for (col, name) in columns.iter_mut().zip(&names) {
            let m = linalg::mean(col);
            let s = if n_obs > 1 { linalg::sample_variance(col).sqrt() } else { 0.0 };
            if !(s > 0.0) {
                return Err(Error::Input(format!("cannot standardize constant column `{name}`")));
            }
            col.iter_mut().for_each(|v| *v = (*v - m) / s);
            center.push(m);
            scale.push(s);
        }
        Some(Scaling { center, scale })
    } else {
        None
    };

    let x = DMatrix::from_fn(n_obs, columns.len(), |i, j| columns[j][i]);
    let mut z_names = vec!["(Intercept)".to_string()];
    let mut z_cols = vec![vec![1.0; n_obs]];
    for (&c, name) in slope_cols.iter().zip(&spec.random_slopes) {
        z_cols.push(numeric_column(c, name)?);
        z_names.push(name.clone());
    }
    let z = DMatrix::from_fn(n_obs, z_cols.len(), |i, j| z_cols[j][i]);

    let mut data = Dataset::new(y, cluster, x, names.clone(), z, z_names)?;
    if let Some(cc) = &spec.cluster_constant {
        let idx: Vec<usize> = cc
            .iter()
            .map(|n| names.iter().position(|m| m == n).ok_or_else(|| Error::MissingColumn(n.clone())))
            .collect::<Result<_>>()?;
        data = data.with_cluster_constant(idx)?;
    }
    Ok(Ingested {
        data,
        scaling,
        dropped_rows,
    })
}

/// Rounds to 12 significant digits.
pub fn round12(x: f64) -> f64 {
    if !x.is_finite() {
        return x;
    }
    format!("{x:.11e}").parse().unwrap()
}

pub fn fmt12(x: f64) -> String {
    format!("{}", round12(x))
}

#[derive(Debug, Serialize)]
struct Coefficient {
    name: String,
    estimate: f64,
}

#[derive(Debug, Serialize)]
struct Estimates {
    intercept: f64,
    coefficients: Vec<Coefficient>,
    #[serde(rename = "Q")]
    q: Vec<Vec<f64>>,
    random_effects: Vec<String>,
    sigma2: f64,
    m_star: usize,
    m_stop: usize,
}

fn coefficient_row(trace: &BoostTrace, m: usize, scaling: Option<&Scaling>) -> (f64, DVector<f64>) {
    let s = trace.state_at(m);
    match scaling {
        Some(sc) => sc.back_transform(s.beta0, &s.beta),
        None => (s.beta0, s.beta),
    }
}

/// Writes estimates.json, path.csv, ranef.csv and, given a curve, cv.csv.
/// The reported model is the trace state at `m_star`.
pub fn export_results(
    trace: &BoostTrace,
    curve: Option<&CvCurve>,
    m_star: usize,
    data: &Dataset,
    scaling: Option<&Scaling>,
    out_dir: &Path,
) -> Result<()> {
    if m_star > trace.iterations() {
        return Err(Error::Input(format!(
            "m* = {m_star} exceeds the {} available iterations",
            trace.iterations()
        )));
    }
    fs::create_dir_all(out_dir)?;
    let state = trace.state_at(m_star);
    let (beta0, beta) = coefficient_row(trace, m_star, scaling);
    let est = Estimates {
        intercept: round12(beta0),
        coefficients: data
            .x_names()
            .iter()
            .zip(beta.iter())
            .map(|(n, &b)| Coefficient {
                name: n.clone(),
                estimate: round12(b),
            })
            .collect(),
        q: state.q.row_iter().map(|r| r.iter().map(|&v| round12(v)).collect()).collect(),
        random_effects: data.z_names().to_vec(),
        sigma2: round12(state.sigma2),
        m_star,
        m_stop: trace.iterations(),
    };
    fs::write(out_dir.join("estimates.json"), serde_json::to_string_pretty(&est)? + "\n")?;

    let mut w = csv::Writer::from_path(out_dir.join("path.csv"))?;
    let mut header = vec!["iteration".to_string(), "(Intercept)".to_string()];
    header.extend(data.x_names().iter().cloned());
    header.push("selected".into());
    w.write_record(&header)?;
    for m in 0..=trace.iterations() {
        let (b0, b) = coefficient_row(trace, m, scaling);
        let mut row = vec![m.to_string(), fmt12(b0)];
        row.extend(b.iter().map(|&v| fmt12(v)));
        row.push(if m == 0 { String::new() } else { data.x_names()[trace.selected[m - 1]].clone() });
        w.write_record(&row)?;
    }
    w.flush()?;

    write_ranef(&state, data, &out_dir.join("ranef.csv"))?;

    if let Some(curve) = curve {
        let mut w = csv::Writer::from_path(out_dir.join("cv.csv"))?;
        w.write_record(["iteration", "cv"])?;
        for (i, v) in curve.values.iter().enumerate() {
            w.write_record([(i + 1).to_string(), fmt12(*v)])?;
        }
        w.flush()?;
    }
    Ok(())
}

pub fn write_ranef(state: &ParamState, data: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["cluster".to_string()];
    header.extend(data.z_names().iter().cloned());
    w.write_record(&header)?;
    for (i, label) in data.cluster_labels().iter().enumerate() {
        let mut row = vec![label.clone()];
        row.extend(state.gamma.row(i).iter().map(|&v| fmt12(v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a ranef.csv back into (cluster labels, γ̂ matrix).
pub fn read_ranef(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut r = csv::Reader::from_path(path)?;
    let q = r.headers()?.len().saturating_sub(1);
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        labels.push(rec[0].to_string());
        for j in 1..=q {
            values.push(parse_num(&rec[j]).ok_or_else(|| Error::Input(format!("bad value `{}`", &rec[j])))?);
        }
    }
    Ok((labels.clone(), DMatrix::from_row_slice(labels.len(), q, &values)))
}

/// Parses a flat `key = value` file; `#` starts a comment.
pub fn read_config(path: &Path) -> Result<BTreeMap<String, String>> {
    parse_config(&fs::read_to_string(path)?)
}

pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Input(format!("config line {}: expected key = value", no + 1)))?;
        out.insert(k.trim().replace('_', "-"), v.trim().to_string());
    }
    Ok(out)
}
