//! Data generators and the estimator/full dataset views.
//!
//! Generators return typed observations including simulation-only ground
//! truth. View builders split those into an estimator-facing [`Dataset`]
//! (ground truth stripped, unobserved responses poisoned with NaN so any
//! accidental read trips the engine's finiteness checks) and a full view
//! whose extra columns carry the [`TRUTH_PREFIX`] marker.
//!
//! Column orders:
//! * mnar estimator: `x, a, y`; full adds `_truth_y_full`.
//! * sensitivity estimator: `x1..x10, a, y`; full adds `_truth_u`.
//! * shift estimator: `x, a, y`; the full view is identical (nothing is
//!   hidden in this design).

use crate::{expit, ExampleError, SENS_P};
use fredholm::Dataset;
use quadrature::Rng;
use std::path::Path;

/// Column-name prefix marking simulation-only ground truth.
pub const TRUTH_PREFIX: &str = "_truth_";

/// One regression observation with a possibly missing response.
#[derive(Clone, Copy, Debug)]
pub struct MnarObservation {
    pub x: f64,
    /// Missingness indicator; y is observed iff a = 1.
    pub a: f64,
    /// Observed response; NaN when a = 0.
    pub y: f64,
    /// Simulation-only complete response; never shown to estimators.
    pub y_full: f64,
}

/// One observation of the confounded binary-outcome model.
#[derive(Clone, Copy, Debug)]
pub struct SensObservation {
    pub x: [f64; SENS_P],
    pub a: f64,
    pub y: f64,
    /// Simulation-only confounder value; never shown to estimators.
    pub u_true: f64,
}

/// One observation pooled across source (a = 1) and target (a = 0).
#[derive(Clone, Copy, Debug)]
pub struct ShiftObservation {
    pub x: f64,
    pub a: f64,
    pub y: f64,
}

/// Estimator-facing and full views of one generated replication.
pub struct GeneratedData {
    /// Ground truth stripped; safe to hand to any estimator.
    pub estimator: Dataset,
    /// Estimator columns plus `_truth_`-prefixed ground-truth columns.
    pub full: Dataset,
}

/// X ~ N(0.5, 0.25), Y = b1 + b2 X + N(0,1), A ~ Bern(expit(1 + Y)).
pub fn gen_mnar(n: usize, seed: u64, beta_star: [f64; 2]) -> Vec<MnarObservation> {
    assert!(n >= 1, "need at least one observation");
    let mut rng = Rng::from_seed(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let x = 0.5 + 0.5 * rng.normal();
        let y_full = beta_star[0] + beta_star[1] * x + rng.normal();
        let a = rng.bernoulli(expit(1.0 + y_full));
        let y = if a == 1.0 { y_full } else { f64::NAN };
        out.push(MnarObservation { x, a, y, y_full });
    }
    out
}

pub fn mnar_views(obs: &[MnarObservation]) -> GeneratedData {
    let est_rows: Vec<Vec<f64>> = obs.iter().map(|o| vec![o.x, o.a, o.y]).collect();
    let full_rows: Vec<Vec<f64>> =
        obs.iter().map(|o| vec![o.x, o.a, o.y, o.y_full]).collect();
    GeneratedData {
        estimator: Dataset::from_rows(
            vec!["x".into(), "a".into(), "y".into()],
            &est_rows,
        )
        .expect("rectangular by construction"),
        full: Dataset::from_rows(
            vec!["x".into(), "a".into(), "y".into(), format!("{TRUTH_PREFIX}y_full")],
            &full_rows,
        )
        .expect("rectangular by construction"),
    }
}

/// X_j iid U(0,1), U = X1 - X2^2 + N(0, 0.1), and with the alternating sum
/// sx = sum_j (-1)^(j+1) X_j: A ~ Bern(expit(3 sx + 2U)),
/// Y ~ Bern(expit(4 sx + b* A + 2U)).
pub fn gen_sens(n: usize, seed: u64, beta_star: f64) -> Vec<SensObservation> {
    assert!(n >= 1, "need at least one observation");
    let mut rng = Rng::from_seed(seed);
    let sd = 0.1f64.sqrt();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut x = [0.0; SENS_P];
        for xi in &mut x {
            *xi = rng.uniform();
        }
        let u = x[0] - x[1] * x[1] + sd * rng.normal();
        let sx: f64 = x
            .iter()
            .enumerate()
            .map(|(j, &xj)| if j % 2 == 0 { xj } else { -xj })
            .sum();
        let a = rng.bernoulli(expit(3.0 * sx + 2.0 * u));
        let y = rng.bernoulli(expit(4.0 * sx + beta_star * a + 2.0 * u));
        out.push(SensObservation { x, a, y, u_true: u });
    }
    out
}

pub fn sens_views(obs: &[SensObservation]) -> GeneratedData {
    let mut names: Vec<String> = (1..=SENS_P).map(|j| format!("x{j}")).collect();
    names.push("a".into());
    names.push("y".into());
    let est_rows: Vec<Vec<f64>> = obs
        .iter()
        .map(|o| {
            let mut r = o.x.to_vec();
            r.push(o.a);
            r.push(o.y);
            r
        })
        .collect();
    let mut full_names = names.clone();
    full_names.push(format!("{TRUTH_PREFIX}u"));
    let full_rows: Vec<Vec<f64>> = obs
        .iter()
        .zip(&est_rows)
        .map(|(o, r)| {
            let mut fr = r.clone();
            fr.push(o.u_true);
            fr
        })
        .collect();
    GeneratedData {
        estimator: Dataset::from_rows(names, &est_rows).expect("rectangular by construction"),
        full: Dataset::from_rows(full_names, &full_rows).expect("rectangular by construction"),
    }
}

/// X ~ U(1,3), A ~ Bern(expit(x)), Y ~ Bern(expit(x + a)); the source arm
/// (a = 1) drifts the outcome logit by +1.
pub fn gen_shift(n: usize, seed: u64) -> Vec<ShiftObservation> {
    assert!(n >= 1, "need at least one observation");
    let mut rng = Rng::from_seed(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.uniform_in(1.0, 3.0);
        let a = rng.bernoulli(expit(x));
        let y = rng.bernoulli(expit(x + a));
        out.push(ShiftObservation { x, a, y });
    }
    out
}

pub fn shift_views(obs: &[ShiftObservation]) -> GeneratedData {
    let rows: Vec<Vec<f64>> = obs.iter().map(|o| vec![o.x, o.a, o.y]).collect();
    let names = vec!["x".to_string(), "a".to_string(), "y".to_string()];
    GeneratedData {
        estimator: Dataset::from_rows(names.clone(), &rows)
            .expect("rectangular by construction"),
        full: Dataset::from_rows(names, &rows).expect("rectangular by construction"),
    }
}

/// Writes a dataset as CSV: header row, "." decimals, NaN as "NA", LF.
pub fn write_dataset_csv(path: &Path, data: &Dataset) -> Result<(), ExampleError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| ExampleError::Csv(format!("{}: {e}", path.display())))?;
    w.write_record(data.names())
        .map_err(|e| ExampleError::Csv(e.to_string()))?;
    for i in 0..data.n() {
        let rec: Vec<String> = data
            .row(i)
            .iter()
            .map(|&v| if v.is_nan() { "NA".to_string() } else { format!("{v}") })
            .collect();
        w.write_record(&rec).map_err(|e| ExampleError::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| ExampleError::Csv(e.to_string()))?;
    Ok(())
}

/// Reads back a dataset CSV, full view: every column is kept.
pub fn read_dataset_csv(path: &Path) -> Result<Dataset, ExampleError> {
    read_csv_impl(path, false)
}

/// Estimator-facing loader: `_truth_`-prefixed columns are stripped.
pub fn read_estimator_csv(path: &Path) -> Result<Dataset, ExampleError> {
    read_csv_impl(path, true)
}

fn read_csv_impl(path: &Path, strip_truth: bool) -> Result<Dataset, ExampleError> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| ExampleError::Csv(format!("{}: {e}", path.display())))?;
    let headers = r
        .headers()
        .map_err(|e| ExampleError::Csv(e.to_string()))?
        .clone();
    let keep: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| !(strip_truth && h.starts_with(TRUTH_PREFIX)))
        .map(|(k, _)| k)
        .collect();
    if keep.is_empty() {
        return Err(ExampleError::Csv(format!(
            "{}: no data columns after stripping ground truth",
            path.display()
        )));
    }
    let names: Vec<String> = keep.iter().map(|&k| headers[k].to_string()).collect();
    let mut flat = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| ExampleError::Csv(e.to_string()))?;
        for &k in &keep {
            let raw = rec.get(k).ok_or_else(|| {
                ExampleError::Csv(format!("row {}: missing column {}", line + 2, &headers[k]))
            })?;
            let v = if raw == "NA" {
                f64::NAN
            } else {
                raw.parse::<f64>().map_err(|e| {
                    ExampleError::Csv(format!("row {}: bad number {raw:?}: {e}", line + 2))
                })?
            };
            flat.push(v);
        }
    }
    Dataset::new(names, flat).map_err(ExampleError::Numeric)
}
