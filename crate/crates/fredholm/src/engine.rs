//! Residual evaluation engine shared by the loss and both solvers.
//!
//! The engine materializes, for a fixed beta, everything the residual
//! needs at the grid nodes: separable kernel factors G (inner nodes) and
//! H (outer nodes) per observation, or the dense pointwise kernel block;
//! forcing rows C; and the optional scalar weight rows w. Solvers reuse
//! the tableau across many b-updates while beta is frozen.

use crate::{Dataset, FredholmError, FredholmProblem, Kernel, SolutionFn};
use quadrature::QuadratureGrid;

/// Per-beta node values of kernel factors, forcing, and weight.
pub(crate) struct Tableau {
    pub n: usize,
    pub j1: usize,
    pub j2: usize,
    pub q: usize,
    /// Coefficient on the w*b term (1 or -lambda).
    pub alpha: f64,
    /// Inner Monte Carlo weight: volume / J2.
    pub wq: f64,
    pub averaged: bool,
    /// Separable factors: per term, row-major n x J2 / n x J1.
    pub g: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
    /// Pointwise kernel, n x J1 x J2 (obs-major), when not separable.
    pub k: Option<Vec<f64>>,
    /// Forcing rows: averaged -> J1 x q (dataset mean); else n x J1 x q.
    pub c: Vec<f64>,
    /// Weight rows: averaged -> J1 (dataset mean); else n x J1. None = 1.
    pub w: Option<Vec<f64>>,
}

fn check_finite(
    vals: &[f64],
    what: &'static str,
    obs_index: usize,
) -> Result<(), FredholmError> {
    for (k, &v) in vals.iter().enumerate() {
        if !v.is_finite() {
            return Err(FredholmError::NonFinite {
                what,
                index: k,
                detail: format!("value {v} for observation {obs_index}"),
            });
        }
    }
    Ok(())
}

pub(crate) fn build_tableau(
    p: &FredholmProblem,
    data: &Dataset,
    beta: &[f64],
    grid: &QuadratureGrid,
) -> Result<Tableau, FredholmError> {
    p.validate()?;
    let n = data.n();
    if n == 0 {
        return Err(FredholmError::Config("empty dataset".into()));
    }
    let (j1, j2, q) = (grid.j1(), grid.j2(), p.q);
    let (sd, td) = (grid.inner_dim(), grid.outer_dim());
    let mut tab = Tableau {
        n,
        j1,
        j2,
        q,
        alpha: p.mode.alpha(),
        wq: grid.inner_weight(),
        averaged: p.averaged,
        g: Vec::new(),
        h: Vec::new(),
        k: None,
        c: Vec::new(),
        w: None,
    };

    match &p.kernel {
        Kernel::Zero => {}
        Kernel::Separable(terms) => {
            for term in terms {
                let mut gm = vec![0.0; n * j2];
                let mut hm = vec![0.0; n * j1];
                for i in 0..n {
                    let obs = data.row(i);
                    (term.left)(obs, beta, grid.inner_points(), sd, &mut gm[i * j2..(i + 1) * j2]);
                    (term.right)(obs, beta, grid.outer_points(), td, &mut hm[i * j1..(i + 1) * j1]);
                    check_finite(&gm[i * j2..(i + 1) * j2], "kernel factor (inner)", i)?;
                    check_finite(&hm[i * j1..(i + 1) * j1], "kernel factor (outer)", i)?;
                }
                tab.g.push(gm);
                tab.h.push(hm);
            }
        }
        Kernel::Pointwise(kf) => {
            let mut kv = vec![0.0; n * j1 * j2];
            for i in 0..n {
                let obs = data.row(i);
                for l in 0..j1 {
                    let t = grid.outer_point(l);
                    let block = &mut kv[(i * j1 + l) * j2..(i * j1 + l + 1) * j2];
                    for (j, slot) in block.iter_mut().enumerate() {
                        *slot = kf(grid.inner_point(j), t, obs, beta);
                    }
                    check_finite(&kv[(i * j1 + l) * j2..(i * j1 + l + 1) * j2], "kernel", i)?;
                }
            }
            tab.k = Some(kv);
        }
    }

    // forcing rows
    let mut crow = vec![0.0; j1 * q];
    if p.averaged {
        let mut cbar = vec![0.0; j1 * q];
        for i in 0..n {
            (p.forcing)(data.row(i), beta, grid.outer_points(), td, &mut crow);
            check_finite(&crow, "forcing", i)?;
            for (acc, v) in cbar.iter_mut().zip(&crow) {
                *acc += v;
            }
        }
        for v in &mut cbar {
            *v /= n as f64;
        }
        tab.c = cbar;
    } else {
        let mut call = vec![0.0; n * j1 * q];
        for i in 0..n {
            (p.forcing)(data.row(i), beta, grid.outer_points(), td, &mut crow);
            check_finite(&crow, "forcing", i)?;
            call[i * j1 * q..(i + 1) * j1 * q].copy_from_slice(&crow);
        }
        tab.c = call;
    }

    // weight rows
    if let Some(wf) = &p.weight {
        let mut wrow = vec![0.0; j1];
        if p.averaged {
            let mut wbar = vec![0.0; j1];
            for i in 0..n {
                wf(data.row(i), beta, grid.outer_points(), td, &mut wrow);
                check_finite(&wrow, "weight", i)?;
                for (acc, v) in wbar.iter_mut().zip(&wrow) {
                    *acc += v;
                }
            }
            for v in &mut wbar {
                *v /= n as f64;
            }
            tab.w = Some(wbar);
        } else {
            let mut wall = vec![0.0; n * j1];
            for i in 0..n {
                wf(data.row(i), beta, grid.outer_points(), td, &mut wrow);
                check_finite(&wrow, "weight", i)?;
                wall[i * j1..(i + 1) * j1].copy_from_slice(&wrow);
            }
            tab.w = Some(wall);
        }
    }

    Ok(tab)
}

/// b evaluated at grid nodes: inner blocks (J2 x q) and outer blocks
/// (J1 x q), one block per observation unless the problem has no
/// covariates, in which case a single shared block serves every row.
pub(crate) struct BValues {
    pub shared: bool,
    pub inner: Vec<f64>,
    pub outer: Vec<f64>,
    pub j1: usize,
    pub j2: usize,
    pub q: usize,
}

impl BValues {
    pub fn inner_block(&self, i: usize) -> &[f64] {
        if self.shared || self.inner.is_empty() {
            &self.inner
        } else {
            &self.inner[i * self.j2 * self.q..(i + 1) * self.j2 * self.q]
        }
    }
    pub fn outer_block(&self, i: usize) -> &[f64] {
        if self.shared {
            &self.outer
        } else {
            &self.outer[i * self.j1 * self.q..(i + 1) * self.j1 * self.q]
        }
    }
}

/// Row-major b-argument points: each node prefixed row gets the
/// observation covariates appended (when the problem has any).
pub(crate) fn b_arg_rows(
    nodes: &[f64],
    node_dim: usize,
    cov: Option<&[f64]>,
    out: &mut Vec<f64>,
) {
    let k = nodes.len() / node_dim;
    match cov {
        None => out.extend_from_slice(nodes),
        Some(c) => {
            out.reserve(k * (node_dim + c.len()));
            for r in 0..k {
                out.extend_from_slice(&nodes[r * node_dim..(r + 1) * node_dim]);
                out.extend_from_slice(c);
            }
        }
    }
}

pub(crate) fn build_b_values(
    p: &FredholmProblem,
    data: &Dataset,
    b: &dyn SolutionFn,
    grid: &QuadratureGrid,
) -> Result<BValues, FredholmError> {
    let (j1, j2, q) = (grid.j1(), grid.j2(), p.q);
    if b.q() != q {
        return Err(FredholmError::Config(format!(
            "solution has q = {}, problem needs {}",
            b.q(),
            q
        )));
    }
    let shared = p.covariates.is_none();
    let mut pts = Vec::new();
    if shared {
        b_arg_rows(grid.inner_points(), grid.inner_dim(), None, &mut pts);
        b_arg_rows(grid.outer_points(), grid.outer_dim(), None, &mut pts);
    } else {
        let cov_fn = p.covariates.as_ref().unwrap();
        let mut cov = Vec::new();
        for i in 0..data.n() {
            cov.clear();
            cov_fn(data.row(i), &mut cov);
            b_arg_rows(grid.inner_points(), grid.inner_dim(), Some(&cov), &mut pts);
        }
        for i in 0..data.n() {
            cov.clear();
            cov_fn(data.row(i), &mut cov);
            b_arg_rows(grid.outer_points(), grid.outer_dim(), Some(&cov), &mut pts);
        }
    }
    let mut vals = Vec::new();
    b.eval_rows(&pts, &mut vals);
    let inner_len = if shared { j2 * q } else { data.n() * j2 * q };
    let outer = vals.split_off(inner_len);
    Ok(BValues { shared, inner: vals, outer, j1, j2, q })
}

/// Residual rows R over outer nodes: one `J1 x q` block per observation,
/// or a single shared block for averaged problems.
#[derive(Debug)]
pub struct ResidualRows {
    pub per_obs: bool,
    pub n: usize,
    pub j1: usize,
    pub q: usize,
    pub rows: Vec<f64>,
}

impl ResidualRows {
    pub fn block(&self, i: usize) -> &[f64] {
        if self.per_obs {
            &self.rows[i * self.j1 * self.q..(i + 1) * self.j1 * self.q]
        } else {
            &self.rows
        }
    }
}

/// Inner integrals I_{m,c}(i) = wq * sum_j G_m[i,j] * b_c(s_j, i) for one
/// observation, all separable terms, all components. Layout: term-major,
/// then component.
pub(crate) fn inner_integrals(tab: &Tableau, bv: &BValues, i: usize, out: &mut [f64]) {
    let (j2, q) = (tab.j2, tab.q);
    let binner = bv.inner_block(i);
    for (m, gm) in tab.g.iter().enumerate() {
        let grow = &gm[i * j2..(i + 1) * j2];
        for c in 0..q {
            let mut s = 0.0;
            for j in 0..j2 {
                s += grow[j] * binner[j * q + c];
            }
            out[m * q + c] = s * tab.wq;
        }
    }
}

pub(crate) fn residual_from(tab: &Tableau, bv: &BValues) -> ResidualRows {
    let (n, j1, j2, q) = (tab.n, tab.j1, tab.j2, tab.q);
    let nterms = tab.g.len();
    if tab.averaged {
        let mut rows = vec![0.0; j1 * q];
        // kernel part: mean over observations of H[i,l] * I[i]
        let mut ints = vec![0.0; nterms * q];
        for i in 0..n {
            inner_integrals(tab, bv, i, &mut ints);
            for (m, hm) in tab.h.iter().enumerate() {
                let hrow = &hm[i * j1..(i + 1) * j1];
                for l in 0..j1 {
                    let hv = hrow[l];
                    for c in 0..q {
                        rows[l * q + c] += hv * ints[m * q + c];
                    }
                }
            }
        }
        let inv_n = 1.0 / n as f64;
        for v in &mut rows {
            *v *= inv_n;
        }
        // forcing and weighted-b part on the shared block
        let bouter = bv.outer_block(0);
        for l in 0..j1 {
            let wl = tab.w.as_ref().map_or(1.0, |w| w[l]);
            for c in 0..q {
                rows[l * q + c] -= tab.c[l * q + c] + tab.alpha * wl * bouter[l * q + c];
            }
        }
        return ResidualRows { per_obs: false, n, j1, q, rows };
    }

    let mut rows = vec![0.0; n * j1 * q];
    let mut ints = vec![0.0; nterms * q];
    for i in 0..n {
        let block = &mut rows[i * j1 * q..(i + 1) * j1 * q];
        match &tab.k {
            Some(kv) => {
                let binner = bv.inner_block(i);
                for l in 0..j1 {
                    let krow = &kv[(i * j1 + l) * j2..(i * j1 + l + 1) * j2];
                    for c in 0..q {
                        let mut s = 0.0;
                        for j in 0..j2 {
                            s += krow[j] * binner[j * q + c];
                        }
                        block[l * q + c] = s * tab.wq;
                    }
                }
            }
            None => {
                inner_integrals(tab, bv, i, &mut ints);
                for (m, hm) in tab.h.iter().enumerate() {
                    let hrow = &hm[i * j1..(i + 1) * j1];
                    for l in 0..j1 {
                        let hv = hrow[l];
                        for c in 0..q {
                            block[l * q + c] += hv * ints[m * q + c];
                        }
                    }
                }
            }
        }
        let bouter = bv.outer_block(i);
        let crow = &tab.c[i * j1 * q..(i + 1) * j1 * q];
        for l in 0..j1 {
            let wl = tab.w.as_ref().map_or(1.0, |w| w[i * j1 + l]);
            for c in 0..q {
                block[l * q + c] -= crow[l * q + c] + tab.alpha * wl * bouter[l * q + c];
            }
        }
    }
    ResidualRows { per_obs: true, n, j1, q, rows }
}

/// Residual rows for the whole dataset at a fixed beta.
pub fn residual_rows(
    p: &FredholmProblem,
    b: &dyn SolutionFn,
    data: &Dataset,
    beta: &[f64],
    grid: &QuadratureGrid,
) -> Result<ResidualRows, FredholmError> {
    let tab = build_tableau(p, data, beta, grid)?;
    let bv = build_b_values(p, data, b, grid)?;
    Ok(residual_from(&tab, &bv))
}

/// Residual vector (length q) at a single outer point for one observation.
/// For averaged problems this treats the observation as a singleton
/// dataset (the residual is defined through dataset means).
pub fn residual(
    p: &FredholmProblem,
    b: &dyn SolutionFn,
    t: &[f64],
    obs: &[f64],
    beta: &[f64],
    grid: &QuadratureGrid,
) -> Result<Vec<f64>, FredholmError> {
    p.validate()?;
    let q = p.q;
    let td = grid.outer_dim();
    assert_eq!(t.len(), td, "outer point has wrong dimension");
    let data = Dataset::new(
        (0..obs.len().max(1)).map(|k| format!("c{k}")).collect(),
        if obs.is_empty() { vec![0.0] } else { obs.to_vec() },
    )?;
    // reuse the engine on a single-observation dataset with a single outer node
    let single = single_outer_grid(grid, t);
    let tab = build_tableau(p, &data, beta, &single)?;
    let bv = build_b_values(p, &data, b, &single)?;
    let rows = residual_from(&tab, &bv);
    Ok(rows.rows[..q].to_vec())
}

/// Grid view with the same inner nodes but a single outer node.
fn single_outer_grid(grid: &QuadratureGrid, t: &[f64]) -> QuadratureGrid {
    quadrature::QuadratureGrid::with_nodes(
        t.to_vec(),
        grid.inner_points().to_vec(),
        grid.t_domain().clone(),
        grid.s_domain().clone(),
    )
}

/// Inner loss: mean over observations of the 1/J1-weighted squared
/// residual norm over outer nodes.
pub fn loss_k(
    p: &FredholmProblem,
    b: &dyn SolutionFn,
    data: &Dataset,
    beta: &[f64],
    grid: &QuadratureGrid,
) -> Result<f64, FredholmError> {
    let rows = residual_rows(p, b, data, beta, grid)?;
    loss_from_rows(&rows)
}

pub(crate) fn loss_from_rows(rows: &ResidualRows) -> Result<f64, FredholmError> {
    let blocks = if rows.per_obs { rows.n } else { 1 };
    let mut total = 0.0;
    for i in 0..blocks {
        let block = rows.block(i);
        let mut s = 0.0;
        for &v in block {
            s += v * v;
        }
        total += s / rows.j1 as f64;
    }
    let loss = total / blocks as f64;
    if !loss.is_finite() {
        return Err(FredholmError::NonFinite {
            what: "loss",
            index: 0,
            detail: format!("loss value {loss}"),
        });
    }
    Ok(loss)
}
