//! Polynomial-collocation baseline solver.
//!
//! For fixed beta the residual is linear in the coefficients of a
//! polynomial b, so the inner loss is minimized by a single linear
//! least-squares solve: one design row per (observation, outer node),
//! shared across output components since the basis is.

use crate::engine::{self, Tableau};
use crate::{Dataset, FredholmError, FredholmProblem};
use nalgebra::DMatrix;
use quadrature::QuadratureGrid;
use serde::{Deserialize, Serialize};

/// Polynomial estimate of b over the concatenated argument
/// (node coordinates then covariates).
#[derive(Clone, Debug)]
pub struct PolynomialCoefficients {
    pub degree: usize,
    pub q: usize,
    pub input_dim: usize,
    /// Monomial exponents, row-major `k x input_dim`, graded
    /// lexicographic order (total degree, then lex descending).
    pub exponents: Vec<u32>,
    /// Coefficients, row-major `k x q`, matching `exponents`.
    pub coeffs: Vec<f64>,
    /// True when the design matrix was rank-deficient and the
    /// minimum-norm least-squares solution was returned instead.
    pub rank_deficient: bool,
}

/// Basis-size ceiling; degrees requesting more coefficients are config errors.
const MAX_COEFFS: usize = 10_000;

/// Number of monomials of total degree <= d in `dim` variables:
/// C(dim + d, d), computed exactly term by term.
pub fn n_monomials(dim: usize, degree: usize) -> Option<usize> {
    let mut num: u128 = 1;
    for k in 1..=degree {
        num = num.checked_mul((dim + k) as u128)? / k as u128;
        if num > 1_000_000 {
            return None;
        }
    }
    Some(num as usize)
}

/// All exponent tuples with total degree <= degree, graded-lex order.
pub fn graded_lex_exponents(dim: usize, degree: usize) -> Vec<u32> {
    fn fill(dim: usize, pos: usize, remaining: u32, tuple: &mut [u32], out: &mut Vec<u32>) {
        if pos == dim - 1 {
            tuple[pos] = remaining;
            out.extend_from_slice(tuple);
            return;
        }
        for v in (0..=remaining).rev() {
            tuple[pos] = v;
            fill(dim, pos + 1, remaining - v, tuple, out);
        }
    }
    let mut out = Vec::new();
    let mut tuple = vec![0u32; dim];
    for total in 0..=degree as u32 {
        fill(dim, 0, total, &mut tuple, &mut out);
    }
    out
}

/// Monomial design rows: `out[r*k_count + k] = prod_d pts[r,d]^e[k,d]`.
fn phi_rows(pts: &[f64], dim: usize, exponents: &[u32], out: &mut Vec<f64>) {
    let k_count = exponents.len() / dim;
    let rows = pts.len() / dim;
    out.clear();
    out.resize(rows * k_count, 0.0);
    for r in 0..rows {
        let x = &pts[r * dim..(r + 1) * dim];
        let dst = &mut out[r * k_count..(r + 1) * k_count];
        for (k, slot) in dst.iter_mut().enumerate() {
            let e = &exponents[k * dim..(k + 1) * dim];
            let mut v = 1.0;
            for d in 0..dim {
                if e[d] > 0 {
                    v *= x[d].powi(e[d] as i32);
                }
            }
            *slot = v;
        }
    }
}

impl PolynomialCoefficients {
    /// All-zero coefficients over the total-degree basis, the starting state
    /// for iterative schemes that re-solve per outer step.
    pub fn zeros(degree: usize, q: usize, input_dim: usize) -> Result<Self, FredholmError> {
        let k = n_monomials(input_dim, degree)
            .filter(|&k| k <= MAX_COEFFS)
            .ok_or_else(|| {
                FredholmError::Config(format!(
                    "degree {degree} in {input_dim} variables needs more than {MAX_COEFFS} coefficients"
                ))
            })?;
        Ok(Self {
            degree,
            q,
            input_dim,
            exponents: graded_lex_exponents(input_dim, degree),
            coeffs: vec![0.0; k * q],
            rank_deficient: false,
        })
    }

    pub(crate) fn eval_rows_impl(&self, pts: &[f64], out: &mut Vec<f64>) {
        let dim = self.input_dim;
        assert!(pts.len() % dim == 0, "point block not a multiple of input dim");
        let rows = pts.len() / dim;
        let k_count = self.exponents.len() / dim;
        out.clear();
        out.resize(rows * self.q, 0.0);
        for r in 0..rows {
            let x = &pts[r * dim..(r + 1) * dim];
            let dst = &mut out[r * self.q..(r + 1) * self.q];
            for k in 0..k_count {
                let e = &self.exponents[k * dim..(k + 1) * dim];
                let mut phi = 1.0;
                for d in 0..dim {
                    if e[d] > 0 {
                        phi *= x[d].powi(e[d] as i32);
                    }
                }
                for c in 0..self.q {
                    dst[c] += self.coeffs[k * self.q + c] * phi;
                }
            }
        }
    }

    /// Serialize as `{"degree": d, "coeffs": [...], ...}` with the dims
    /// needed to reconstruct the basis.
    pub fn to_json(&self) -> String {
        let snap = PolySnapshot {
            degree: self.degree,
            q: self.q,
            input_dim: self.input_dim,
            coeffs: self.coeffs.clone(),
            exponents: Some(self.exponents.clone()),
        };
        serde_json::to_string(&snap).expect("snapshot serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Self, FredholmError> {
        let snap: PolySnapshot =
            serde_json::from_str(s).map_err(|e| FredholmError::Config(e.to_string()))?;
        let exponents = match snap.exponents {
            Some(e) => e,
            None => graded_lex_exponents(snap.input_dim, snap.degree),
        };
        let k_count = exponents.len() / snap.input_dim;
        if snap.coeffs.len() != k_count * snap.q {
            return Err(FredholmError::Config(format!(
                "coefficient count {} does not match {} monomials x {} components",
                snap.coeffs.len(),
                k_count,
                snap.q
            )));
        }
        Ok(PolynomialCoefficients {
            degree: snap.degree,
            q: snap.q,
            input_dim: snap.input_dim,
            exponents,
            coeffs: snap.coeffs,
            rank_deficient: false,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct PolySnapshot {
    degree: usize,
    q: usize,
    input_dim: usize,
    coeffs: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    exponents: Option<Vec<u32>>,
}

/// Exact inner-loss minimizer over polynomials of total degree <= degree.
///
/// Assembles the design matrix (one row per observation and outer node;
/// components share it because the basis does) and solves by column-pivot
/// QR; a rank-deficient design falls back to the minimum-norm SVD solution
/// with `rank_deficient` set.
pub fn solve_polynomial(
    p: &FredholmProblem,
    data: &Dataset,
    beta: &[f64],
    grid: &QuadratureGrid,
    degree: usize,
) -> Result<PolynomialCoefficients, FredholmError> {
    p.validate()?;
    if data.n() == 0 {
        return Err(FredholmError::Config("empty dataset".into()));
    }
    let input_dim = p.b_input_dim(data.row(0));
    let k_count = n_monomials(input_dim, degree)
        .filter(|&k| k <= MAX_COEFFS)
        .ok_or_else(|| {
            FredholmError::Config(format!(
                "degree {degree} in {input_dim} variables needs more than {MAX_COEFFS} coefficients"
            ))
        })?;
    let exponents = graded_lex_exponents(input_dim, degree);
    debug_assert_eq!(exponents.len(), k_count * input_dim);

    let tab = engine::build_tableau(p, data, beta, grid)?;
    let (n, j1, j2, q) = (tab.n, tab.j1, tab.j2, tab.q);
    let (sd, td) = (grid.inner_dim(), grid.outer_dim());

    let nrows = if tab.averaged { j1 } else { n * j1 };
    let mut a = DMatrix::<f64>::zeros(nrows, k_count);
    let mut rhs = DMatrix::<f64>::zeros(nrows, q);

    // shared monomial rows when b's argument carries no covariates
    let shared = p.covariates.is_none();
    let mut phi_in = Vec::new();
    let mut phi_out = Vec::new();
    if shared {
        phi_rows(grid.inner_points(), sd, &exponents, &mut phi_in);
        phi_rows(grid.outer_points(), td, &exponents, &mut phi_out);
    }

    let mut pts = Vec::new();
    let mut cov = Vec::new();
    // inner integrals of each monomial against each separable term:
    // ints[m*k_count + k] = wq * sum_j G_m[i,j] * phi_k(s_j (+ cov_i))
    let mut ints = vec![0.0; tab.g.len() * k_count];
    let kind = tab.kernel_kind();

    for i in 0..n {
        if !shared {
            cov.clear();
            (p.covariates.as_ref().unwrap())(data.row(i), &mut cov);
            pts.clear();
            engine::b_arg_rows(grid.inner_points(), sd, Some(&cov), &mut pts);
            phi_rows(&pts, input_dim, &exponents, &mut phi_in);
            pts.clear();
            engine::b_arg_rows(grid.outer_points(), td, Some(&cov), &mut pts);
            phi_rows(&pts, input_dim, &exponents, &mut phi_out);
        }

        match kind {
            KernelKind::Separable => {
                for (m, gm) in tab.g.iter().enumerate() {
                    let grow = &gm[i * j2..(i + 1) * j2];
                    let dst = &mut ints[m * k_count..(m + 1) * k_count];
                    dst.iter_mut().for_each(|v| *v = 0.0);
                    for j in 0..j2 {
                        let gv = grow[j];
                        if gv == 0.0 {
                            continue;
                        }
                        let prow = &phi_in[j * k_count..(j + 1) * k_count];
                        for k in 0..k_count {
                            dst[k] += gv * prow[k];
                        }
                    }
                    for v in dst.iter_mut() {
                        *v *= tab.wq;
                    }
                }
            }
            KernelKind::Zero | KernelKind::Pointwise => {}
        }

        for l in 0..j1 {
            let row0 = if tab.averaged { l } else { i * j1 + l };
            let prow_out = &phi_out[l * k_count..(l + 1) * k_count];
            let wl = match &tab.w {
                None => 1.0,
                Some(w) if tab.averaged => w[l],
                Some(w) => w[i * j1 + l],
            };
            let scale = if tab.averaged { 1.0 / n as f64 } else { 1.0 };

            match kind {
                KernelKind::Separable => {
                    for (m, hm) in tab.h.iter().enumerate() {
                        let hv = hm[i * j1 + l] * scale;
                        if hv == 0.0 {
                            continue;
                        }
                        let iv = &ints[m * k_count..(m + 1) * k_count];
                        for k in 0..k_count {
                            a[(row0, k)] += hv * iv[k];
                        }
                    }
                }
                KernelKind::Pointwise => {
                    let kv = tab.k.as_ref().unwrap();
                    let krow = &kv[(i * j1 + l) * j2..(i * j1 + l + 1) * j2];
                    for j in 0..j2 {
                        let gv = krow[j] * tab.wq * scale;
                        if gv == 0.0 {
                            continue;
                        }
                        let prow = &phi_in[j * k_count..(j + 1) * k_count];
                        for k in 0..k_count {
                            a[(row0, k)] += gv * prow[k];
                        }
                    }
                }
                KernelKind::Zero => {}
            }

            if tab.averaged {
                // the alpha*w*b and forcing parts are dataset means; add once
                if i == 0 {
                    for k in 0..k_count {
                        a[(row0, k)] -= tab.alpha * wl * prow_out[k];
                    }
                    for c in 0..q {
                        rhs[(row0, c)] = tab.c[l * q + c];
                    }
                }
            } else {
                for k in 0..k_count {
                    a[(row0, k)] -= tab.alpha * wl * prow_out[k];
                }
                for c in 0..q {
                    rhs[(row0, c)] = tab.c[(i * j1 + l) * q + c];
                }
            }
        }
    }

    let (sol, rank_deficient) = lstsq(a, rhs)?;
    let mut coeffs = vec![0.0; k_count * q];
    for k in 0..k_count {
        for c in 0..q {
            coeffs[k * q + c] = sol[(k, c)];
        }
    }
    Ok(PolynomialCoefficients { degree, q, input_dim, exponents, coeffs, rank_deficient })
}

#[derive(Clone, Copy)]
pub(crate) enum KernelKind {
    Zero,
    Pointwise,
    Separable,
}

impl Tableau {
    pub(crate) fn kernel_kind(&self) -> KernelKind {
        if self.k.is_some() {
            KernelKind::Pointwise
        } else if self.g.is_empty() {
            KernelKind::Zero
        } else {
            KernelKind::Separable
        }
    }
}

/// Least squares via column-pivot QR, with SVD minimum-norm fallback on
/// rank deficiency. Returns (solution, rank_deficient).
fn lstsq(a: DMatrix<f64>, rhs: DMatrix<f64>) -> Result<(DMatrix<f64>, bool), FredholmError> {
    let (m, k) = (a.nrows(), a.ncols());
    if m >= k {
        let qr = a.clone().col_piv_qr();
        let r = qr.r();
        // rank test on the pivoted R diagonal
        let rmax = (0..k).map(|i| r[(i, i)].abs()).fold(0.0_f64, f64::max);
        let tol = rmax * (m.max(k) as f64) * f64::EPSILON;
        let full_rank = (0..k).all(|i| r[(i, i)].abs() > tol) && rmax > 0.0;
        if full_rank {
            let mut qtb = rhs.clone();
            qr.q_tr_mul(&mut qtb);
            let mut y = qtb.rows(0, k).into_owned();
            // back substitution on the k x k upper triangle
            for c in 0..y.ncols() {
                for i in (0..k).rev() {
                    let mut s = y[(i, c)];
                    for j in i + 1..k {
                        s -= r[(i, j)] * y[(j, c)];
                    }
                    y[(i, c)] = s / r[(i, i)];
                }
            }
            qr.p().inv_permute_rows(&mut y);
            return Ok((y, false));
        }
    }
    // rank-deficient or underdetermined: minimum-norm solution
    let svd = a.svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let eps = smax * (m.max(k) as f64) * f64::EPSILON;
    let sol = svd
        .solve(&rhs, eps)
        .map_err(|e| FredholmError::Config(format!("SVD solve failed: {e}")))?;
    Ok((sol, true))
}
