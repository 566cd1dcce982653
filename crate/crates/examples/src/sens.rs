//! Causal effect estimation under an unobserved confounder.
//!
//! The outcome and treatment are binary, driven by ten covariates through
//! the alternating sum sx = x1 - x2 + ... - x10 and a hidden confounder
//! U. The analyst guesses a working density eta(u, x) for U | X on
//! [-0.5, 0.5]; the efficient-score correction b(u, x) then solves a
//! first-kind equation stabilized by Tikhonov regularization:
//!
//! ```text
//! int b(u',x) K(u',u,x;beta) du' = C(u,x;beta) - lambda b(u,x)
//! K(u',u,x) = sum_{y,a} p(y,a|x,u') p(y,a|x,u) eta(u',x) / g(y,a,x)
//! C(u,x)    = sum_{y,a} p(y,a|x,u) [int stilde(y,a,x,u') p(y,a|x,u') eta(u',x) du'] / g(y,a,x)
//! g(y,a,x)  = int p(y,a|x,u') eta(u',x) du'
//! ```
//!
//! Because y and a are binary the (y,a)-sums are exact 4-term sums. The
//! u'-integrals that live inside closures use a fixed Simpson rule; the
//! integrals against b use the engine grid.

use crate::gen::{gen_sens, sens_views};
use crate::{expit, simpson_rule, ExampleBundle, ExampleError};
use bilevel::{BiLevelConfig, EstimatingEquation, PsiCtx};
use fredholm::{FredholmProblem, Kernel, ResidualMode, SeparableTerm};
use nn_core::Arch;
use quadrature::Domain;
use std::sync::Arc;

pub const SENS_P: usize = 10;
pub const SENS_BETA_STAR: f64 = 2.0;

const U_LO: f64 = -0.5;
const U_HI: f64 = 0.5;
const NUISANCE_PANELS: usize = 400;
/// A vanishing g means the working mixture puts no mass on an observed
/// (y, a) cell; rows are poisoned so finiteness checks name the culprit.
const G_FLOOR: f64 = 1e-300;

/// The four (y, a) cells in the order (0,0), (0,1), (1,0), (1,1);
/// cell index k = 2y + a.
const CELLS: [(f64, f64); 4] = [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)];

/// Alternating covariate sum x1 - x2 + x3 - ... - x10.
pub(crate) fn alt_sum(x: &[f64]) -> f64 {
    x.iter()
        .enumerate()
        .map(|(j, &xj)| if j % 2 == 0 { xj } else { -xj })
        .sum()
}

/// p(y, a | x, u; beta) for one cell.
fn cell_prob(y: f64, a: f64, sx: f64, u: f64, beta: f64) -> f64 {
    let pa = expit(3.0 * sx + 2.0 * u);
    let py = expit(4.0 * sx + beta * a + 2.0 * u);
    let fa = if a > 0.5 { pa } else { 1.0 - pa };
    let fy = if y > 0.5 { py } else { 1.0 - py };
    fa * fy
}

/// Score of the working joint law in beta: only the outcome factor
/// depends on beta, through the term beta * a in its logit.
pub fn working_score(y: f64, a: f64, x: &[f64], u: f64, beta: f64) -> f64 {
    let sx = alt_sum(x);
    a * (y - expit(4.0 * sx + beta * a + 2.0 * u))
}

/// Fixed quadrature and the working confounder density.
struct SensQuad {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    eta: Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>,
}

impl SensQuad {
    fn new(eta: Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>) -> Self {
        let (nodes, weights) = simpson_rule(U_LO, U_HI, NUISANCE_PANELS);
        SensQuad { nodes, weights, eta }
    }

    /// g_k and the forcing weights w_k = [int stilde_k p_k eta du'] / g_k
    /// for all four cells in one pass.
    fn cell_integrals(&self, sx: f64, x: &[f64], beta: f64) -> ([f64; 4], [f64; 4]) {
        let mut g = [0.0; 4];
        let mut sw = [0.0; 4];
        for (&u, &w) in self.nodes.iter().zip(&self.weights) {
            let e = (self.eta)(u, x);
            if e == 0.0 {
                continue;
            }
            for (k, &(y, a)) in CELLS.iter().enumerate() {
                let p = cell_prob(y, a, sx, u, beta);
                let stilde = a * (y - expit(4.0 * sx + beta * a + 2.0 * u));
                g[k] += w * e * p;
                sw[k] += w * e * stilde * p;
            }
        }
        let mut wk = [0.0; 4];
        for k in 0..4 {
            if g[k] <= G_FLOOR {
                g[k] = f64::NAN;
            }
            wk[k] = sw[k] / g[k];
        }
        (g, wk)
    }
}

/// Builds the bundle under a caller-chosen working confounder density and
/// Tikhonov parameter.
pub fn sens_bundle(
    working_eta: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    lambda: f64,
) -> Result<ExampleBundle, ExampleError> {
    if !(lambda >= 0.0) {
        return Err(ExampleError::Config(format!(
            "tikhonov lambda must be >= 0, got {lambda}"
        )));
    }
    let eta: Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync> = Arc::new(working_eta);
    let quad = Arc::new(SensQuad::new(eta));
    let domain = Domain::interval(U_LO, U_HI).expect("constant bounds");

    // estimator view columns: x1..x10, a, y
    const IA: usize = SENS_P;
    const IY: usize = SENS_P + 1;

    let mut terms = Vec::with_capacity(4);
    for (k, &(y, a)) in CELLS.iter().enumerate() {
        let q_left = quad.clone();
        let left = Arc::new(
            move |obs: &[f64], beta: &[f64], pts: &[f64], dim: usize, out: &mut [f64]| {
                let x = &obs[..SENS_P];
                let sx = alt_sum(x);
                for (j, o) in out.iter_mut().enumerate() {
                    let u = pts[j * dim];
                    *o = cell_prob(y, a, sx, u, beta[0]) * (q_left.eta)(u, x);
                }
            },
        );
        let q_right = quad.clone();
        let right = Arc::new(
            move |obs: &[f64], beta: &[f64], pts: &[f64], dim: usize, out: &mut [f64]| {
                let x = &obs[..SENS_P];
                let sx = alt_sum(x);
                let (g, _) = q_right.cell_integrals(sx, x, beta[0]);
                for (j, o) in out.iter_mut().enumerate() {
                    *o = cell_prob(y, a, sx, pts[j * dim], beta[0]) / g[k];
                }
            },
        );
        terms.push(SeparableTerm { left, right });
    }

    let q_forcing = quad.clone();
    let forcing = Arc::new(
        move |obs: &[f64], beta: &[f64], pts: &[f64], dim: usize, out: &mut [f64]| {
            let x = &obs[..SENS_P];
            let sx = alt_sum(x);
            let (_, wk) = q_forcing.cell_integrals(sx, x, beta[0]);
            for (j, o) in out.iter_mut().enumerate() {
                let u = pts[j * dim];
                let mut c = 0.0;
                for (k, &(y, a)) in CELLS.iter().enumerate() {
                    c += cell_prob(y, a, sx, u, beta[0]) * wk[k];
                }
                *o = c;
            }
        },
    );

    let problem = FredholmProblem {
        q: 1,
        mode: ResidualMode::Tikhonov { lambda },
        s_domain: domain.clone(),
        t_domain: domain,
        kernel: Kernel::Separable(terms),
        forcing,
        weight: None,
        covariates: Some(Arc::new(|obs: &[f64], out: &mut Vec<f64>| {
            out.extend_from_slice(&obs[..SENS_P]);
        })),
        averaged: false,
        beta_dependent: true,
    };

    let q_psi = quad.clone();
    let psi = EstimatingEquation {
        q: 1,
        needs_inner: true,
        eval: Arc::new(move |ctx: &PsiCtx, out: &mut [f64]| {
            let x = &ctx.obs[..SENS_P];
            let sx = alt_sum(x);
            let (yi, ai) = (ctx.obs[IY], ctx.obs[IA]);
            let beta = ctx.beta[0];
            let mut num = 0.0;
            let mut den = 0.0;
            let j2 = ctx.nodes.len() / ctx.node_dim;
            for j in 0..j2 {
                let u = ctx.nodes[j * ctx.node_dim];
                let e = (q_psi.eta)(u, x);
                if e == 0.0 {
                    continue;
                }
                let p = cell_prob(yi, ai, sx, u, beta) * e;
                let stilde = ai * (yi - expit(4.0 * sx + beta * ai + 2.0 * u));
                num += (stilde - ctx.b_nodes[j * ctx.q_b]) * p;
                den += p;
            }
            // node_weight cancels in the ratio; a zero den is poisoned
            out[0] = if den <= G_FLOOR { f64::NAN } else { num / den };
        }),
    };

    let generate =
        Arc::new(move |n: usize, seed: u64| sens_views(&gen_sens(n, seed, SENS_BETA_STAR)));

    Ok(ExampleBundle {
        name: "sensitivity",
        generate,
        problem,
        psi,
        arch: Arch::new(1 + SENS_P, 33, 23, 1).expect("static dims"),
        config: BiLevelConfig {
            gamma: 10,
            max_iter: 200,
            tol_beta: 1e-5,
            tol_omega: 1e-4,
            j1: 48,
            j2: 48,
            lr_beta: 0.1,
            lr_omega: 1e-4,
            fd_step: 1e-5,
            batch: 64,
            seed: 0,
            beta_init: vec![0.0],
        },
        beta_star: vec![SENS_BETA_STAR],
        comparators: Vec::new(),
        oracle: None,
        biased: None,
    })
}

/// The bundle under the working model eta = 1 on [-0.5, 0.5] (a uniform
/// guess; the true confounder is Gaussian around x1 - x2^2) and the
/// default lambda = 0.001.
pub fn sens_default_bundle() -> ExampleBundle {
    sens_bundle(|_u, _x| 1.0, 0.001).expect("default lambda is valid")
}
