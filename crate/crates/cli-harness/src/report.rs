//! Per-solver aggregation of simulation rows.
//!
//! NA values are excluded from moments but still count toward the
//! convergence rate (a failed replication is a failure, not a missing
//! observation).

use serde::Serialize;

use crate::rows::SimulationRow;

#[derive(Clone, Debug, Serialize)]
pub struct SolverSummary {
    pub solver: String,
    pub rows: usize,
    pub converged: usize,
    pub convergence_rate: f64,
    /// Per component; None when no finite values were available.
    pub mean_bias: Vec<Option<f64>>,
    /// Sample standard deviation (n - 1); None below two finite values.
    pub std_bias: Vec<Option<f64>>,
    pub mean_iterations: Option<f64>,
    pub mean_wall_ms: Option<f64>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn sample_std(v: &[f64]) -> Option<f64> {
    (v.len() >= 2).then(|| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    })
}

/// Groups rows by solver label in order of first appearance.
pub fn summarize(rows: &[SimulationRow], q: usize) -> Vec<SolverSummary> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.solver.as_str()) {
            order.push(&r.solver);
        }
    }
    order
        .iter()
        .map(|label| {
            let group: Vec<&SimulationRow> =
                rows.iter().filter(|r| r.solver == *label).collect();
            let converged = group.iter().filter(|r| r.converged).count();
            let mut mean_bias = Vec::with_capacity(q);
            let mut std_bias = Vec::with_capacity(q);
            for k in 0..q {
                let vals: Vec<f64> = group
                    .iter()
                    .filter_map(|r| r.bias.get(k).copied().flatten())
                    .filter(|v| v.is_finite())
                    .collect();
                mean_bias.push(mean(&vals));
                std_bias.push(sample_std(&vals));
            }
            let iters: Vec<f64> = group
                .iter()
                .filter_map(|r| r.iterations)
                .map(|v| v as f64)
                .collect();
            let walls: Vec<f64> = group
                .iter()
                .filter_map(|r| r.wall_ms)
                .map(|v| v as f64)
                .collect();
            SolverSummary {
                solver: label.to_string(),
                rows: group.len(),
                converged,
                convergence_rate: converged as f64 / group.len() as f64,
                mean_bias,
                std_bias,
                mean_iterations: mean(&iters),
                mean_wall_ms: mean(&walls),
            }
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "NA".into(),
    }
}

fn fmt_vec(v: &[Option<f64>]) -> String {
    let inner: Vec<String> = v.iter().map(|&x| fmt_opt(x)).collect();
    format!("[{}]", inner.join(", "))
}

/// Fixed-width text table, one line per solver label.
pub fn render_table(summaries: &[SolverSummary]) -> String {
    let header = ["solver", "rows", "conv_rate", "mean_bias", "std_bias", "mean_iter", "mean_wall_ms"];
    let mut cells: Vec<[String; 7]> = vec![header.map(String::from)];
    for s in summaries {
        cells.push([
            s.solver.clone(),
            s.rows.to_string(),
            format!("{:.3}", s.convergence_rate),
            fmt_vec(&s.mean_bias),
            fmt_vec(&s.std_bias),
            fmt_opt(s.mean_iterations),
            fmt_opt(s.mean_wall_ms),
        ]);
    }
    let mut widths = [0usize; 7];
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    for row in &cells {
        let line: Vec<String> = row
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}
