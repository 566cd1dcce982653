//! Simulation row schema and CSV I/O.
//!
//! The dialect is deliberately plain: comma separator, one header line,
//! "." decimal point, "NA" for missing values, LF line endings, no quoting
//! (no field can contain a comma). Floats are written with the shortest
//! representation that round-trips, so identical runs produce identical
//! bytes.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::CliError;

const FIXED_HEAD: [&str; 4] = ["example", "rep", "seed", "solver"];
const FIXED_TAIL: [&str; 5] = ["iterations", "converged", "loss_psi", "loss_K", "wall_ms"];

/// One replication of one solver. `None` numerics render as NA; a failed
/// replication keeps its row with `converged = false` and NA estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulationRow {
    pub example: String,
    pub rep: u64,
    pub seed: u64,
    pub solver: String,
    pub beta_hat: Vec<Option<f64>>,
    /// beta_hat minus the example's true beta, component by component.
    pub bias: Vec<Option<f64>>,
    pub iterations: Option<u64>,
    pub converged: bool,
    pub loss_psi: Option<f64>,
    pub loss_k: Option<f64>,
    pub wall_ms: Option<u64>,
}

/// Column names for a q-dimensional target parameter.
pub fn rows_header(q: usize) -> Vec<String> {
    let mut h: Vec<String> = FIXED_HEAD.iter().map(|s| s.to_string()).collect();
    for k in 1..=q {
        h.push(format!("beta_hat_{k}"));
    }
    for k in 1..=q {
        h.push(format!("bias_{k}"));
    }
    h.extend(FIXED_TAIL.iter().map(|s| s.to_string()));
    h
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x}"),
        _ => "NA".into(),
    }
}

pub fn rows_to_csv(rows: &[SimulationRow], q: usize) -> String {
    let mut s = rows_header(q).join(",");
    s.push('\n');
    for r in rows {
        assert_eq!(r.beta_hat.len(), q, "row beta_hat width");
        assert_eq!(r.bias.len(), q, "row bias width");
        let mut fields: Vec<String> = vec![
            r.example.clone(),
            r.rep.to_string(),
            r.seed.to_string(),
            r.solver.clone(),
        ];
        fields.extend(r.beta_hat.iter().map(|&v| fmt_opt(v)));
        fields.extend(r.bias.iter().map(|&v| fmt_opt(v)));
        fields.push(r.iterations.map_or_else(|| "NA".into(), |v| v.to_string()));
        fields.push(r.converged.to_string());
        fields.push(fmt_opt(r.loss_psi));
        fields.push(fmt_opt(r.loss_k));
        fields.push(r.wall_ms.map_or_else(|| "NA".into(), |v| v.to_string()));
        s.push_str(&fields.join(","));
        s.push('\n');
    }
    s
}

/// Writes through a temp file in the target directory and renames into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .map_err(|e| CliError::Io(format!("creating temp file in {}: {e}", dir.display())))?;
    tmp.write_all(bytes)
        .map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))?;
    tmp.persist(path)
        .map_err(|e| CliError::Io(format!("renaming into {}: {e}", path.display())))?;
    Ok(())
}

fn parse_u64(field: &str, col: &str, line: usize) -> Result<u64, CliError> {
    field.parse().map_err(|_| {
        CliError::Config(format!("rows csv line {line}, column {col}: invalid integer {field:?}"))
    })
}

fn parse_opt_u64(field: &str, col: &str, line: usize) -> Result<Option<u64>, CliError> {
    if field == "NA" {
        Ok(None)
    } else {
        parse_u64(field, col, line).map(Some)
    }
}

fn parse_opt_f64(field: &str, col: &str, line: usize) -> Result<Option<f64>, CliError> {
    if field == "NA" {
        return Ok(None);
    }
    field.parse().map(Some).map_err(|_| {
        CliError::Config(format!("rows csv line {line}, column {col}: invalid number {field:?}"))
    })
}

fn parse_bool(field: &str, col: &str, line: usize) -> Result<bool, CliError> {
    match field {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(CliError::Config(format!(
            "rows csv line {line}, column {col}: expected true or false, got {other:?}"
        ))),
    }
}

/// Parses a rows CSV, returning the rows and the inferred beta dimension.
/// Any deviation from the schema is reported with the offending column.
pub fn parse_rows_csv(text: &str) -> Result<(Vec<SimulationRow>, usize), CliError> {
    let mut lines = text.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| CliError::Config("rows csv: empty file".into()))?;
    let header: Vec<&str> = header_line.split(',').collect();
    let q = header.iter().filter(|h| h.starts_with("beta_hat_")).count();
    if q == 0 {
        return Err(CliError::Config("rows csv: missing column beta_hat_1".into()));
    }
    let expect = rows_header(q);
    for (i, want) in expect.iter().enumerate() {
        match header.get(i) {
            Some(got) if *got == want => {}
            Some(got) => {
                return Err(CliError::Config(format!(
                    "rows csv: expected column {want:?} at position {}, found {got:?}",
                    i + 1
                )))
            }
            None => return Err(CliError::Config(format!("rows csv: missing column {want:?}"))),
        }
    }
    if header.len() > expect.len() {
        return Err(CliError::Config(format!(
            "rows csv: unexpected column {:?}",
            header[expect.len()]
        )));
    }

    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let lineno = i + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != expect.len() {
            return Err(CliError::Config(format!(
                "rows csv line {lineno}: expected {} fields, found {}",
                expect.len(),
                f.len()
            )));
        }
        let mut beta_hat = Vec::with_capacity(q);
        let mut bias = Vec::with_capacity(q);
        for k in 0..q {
            beta_hat.push(parse_opt_f64(f[4 + k], &expect[4 + k], lineno)?);
            bias.push(parse_opt_f64(f[4 + q + k], &expect[4 + q + k], lineno)?);
        }
        let tail = 4 + 2 * q;
        rows.push(SimulationRow {
            example: f[0].to_string(),
            rep: parse_u64(f[1], "rep", lineno)?,
            seed: parse_u64(f[2], "seed", lineno)?,
            solver: f[3].to_string(),
            beta_hat,
            bias,
            iterations: parse_opt_u64(f[tail], "iterations", lineno)?,
            converged: parse_bool(f[tail + 1], "converged", lineno)?,
            loss_psi: parse_opt_f64(f[tail + 2], "loss_psi", lineno)?,
            loss_k: parse_opt_f64(f[tail + 3], "loss_K", lineno)?,
            wall_ms: parse_opt_u64(f[tail + 4], "wall_ms", lineno)?,
        });
    }
    Ok((rows, q))
}

pub fn read_rows_csv(path: &Path) -> Result<(Vec<SimulationRow>, usize), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
    parse_rows_csv(&text)
}
