//! Gaussian linear regression with the response missing not at random.
//!
//! The response model is Y | X=x ~ N(b1 + b2 x, 1) and the missingness
//! probability depends on the unobserved response itself. Estimation
//! posits an arbitrary working model eta2(y) for P(A=1 | Y=y); the
//! resulting efficient-score correction needs a function b(y) solving a
//! second-kind integral equation whose kernel, forcing, and b-weight all
//! enter through their dataset means:
//!
//! ```text
//! mean_i[ p_i(t)/den_i * int p_i(s) eta2(s) b(s) ds ] - mean_i[ C_i(t) ] + mean_i[ p_i(t) ] b(t) = 0
//! C_i(t) = d/dbeta p_i(t) + (S_i / den_i) p_i(t)
//! den_i  = int p_i(s) (1 - eta2(s)) ds,   S_i = int d/dbeta p_i(s) eta2(s) ds
//! ```
//!
//! with p_i(t) the N(b1 + b2 x_i, 1) density. The b-integrals ride the
//! engine's Monte Carlo grid; the scalar nuisance integrals den_i and S_i
//! use a fixed Simpson rule so that closures (which never see the grid)
//! stay self-consistent across the kernel, the forcing, and psi.

use crate::gen::{gen_mnar, mnar_views};
use crate::{expit, simpson_rule, Comparator, ExampleBundle, ExampleError};
use bilevel::{BiLevelConfig, EstimatingEquation, PsiCtx};
use fredholm::{Dataset, FredholmProblem, Kernel, ResidualMode, SeparableTerm};
use nn_core::Arch;
use quadrature::Domain;
use std::sync::Arc;

pub const MNAR_BETA_STAR: [f64; 2] = [0.25, -0.5];

/// Integration range for the response; Y has sd about 1.03 around 0, so
/// [-5, 5] covers beyond 4.8 sigma.
const Y_LO: f64 = -5.0;
const Y_HI: f64 = 5.0;
/// Below this the working model leaves no mass on the missing arm and
/// the equation degenerates; rows are poisoned so the finiteness checks
/// report the offending observation.
const DEN_FLOOR: f64 = 1e-12;
const NUISANCE_PANELS: usize = 1000;

const SQRT_2PI: f64 = 2.5066282746310002;

fn normal_pdf(t: f64, mu: f64) -> f64 {
    let z = t - mu;
    (-0.5 * z * z).exp() / SQRT_2PI
}

/// Fixed quadrature plus the working model, shared by every closure of
/// the bundle.
struct MnarQuad {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    /// eta2 at the fixed nodes.
    eta: Vec<f64>,
    eta2: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl MnarQuad {
    fn new(eta2: Arc<dyn Fn(f64) -> f64 + Send + Sync>) -> Self {
        let (nodes, weights) = simpson_rule(Y_LO, Y_HI, NUISANCE_PANELS);
        let eta = nodes.iter().map(|&s| eta2(s)).collect();
        MnarQuad { nodes, weights, eta, eta2 }
    }

    /// den = int p(s)(1 - eta2(s)) ds and s1 = int p(s)(s - mu) eta2(s) ds;
    /// the second score component is x * s1 because the mean is linear in
    /// beta2 with slope x. Returns NaN on a starved denominator.
    fn nuisance(&self, mu: f64) -> (f64, f64) {
        let mut den = 0.0;
        let mut s1 = 0.0;
        for ((&s, &w), &e) in self.nodes.iter().zip(&self.weights).zip(&self.eta) {
            let p = normal_pdf(s, mu);
            den += w * p * (1.0 - e);
            s1 += w * p * (s - mu) * e;
        }
        if den <= DEN_FLOOR {
            (f64::NAN, f64::NAN)
        } else {
            (den, s1)
        }
    }
}

/// Ordinary least squares of y on (1, x).
fn ols_line(xs: &[f64], ys: &[f64]) -> Result<Vec<f64>, ExampleError> {
    let n = xs.len();
    if n < 2 {
        return Err(ExampleError::Config(format!(
            "least squares needs at least 2 rows, got {n}"
        )));
    }
    let nf = n as f64;
    let xbar = xs.iter().sum::<f64>() / nf;
    let ybar = ys.iter().sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - xbar) * (x - xbar);
        sxy += (x - xbar) * (y - ybar);
    }
    if sxx <= 1e-12 * nf {
        return Err(ExampleError::Config("singular design: x is constant".into()));
    }
    let slope = sxy / sxx;
    Ok(vec![ybar - slope * xbar, slope])
}

/// Full-information reference: least squares on the complete responses.
/// Takes the full view (reads the ground-truth column).
pub fn mnar_oracle(full: &Dataset) -> Result<Vec<f64>, ExampleError> {
    let ix = full
        .col_index("x")
        .ok_or_else(|| ExampleError::Config("full view lacks column x".into()))?;
    let iy = full
        .col_index("_truth_y_full")
        .ok_or_else(|| ExampleError::Config("full view lacks column _truth_y_full".into()))?;
    let (xs, ys): (Vec<f64>, Vec<f64>) =
        (0..full.n()).map(|i| (full.row(i)[ix], full.row(i)[iy])).unzip();
    ols_line(&xs, &ys)
}

/// Complete-case reference: least squares on the a = 1 rows only. Biased
/// because missingness selects on the response.
pub fn mnar_biased(estimator: &Dataset) -> Result<Vec<f64>, ExampleError> {
    let ix = estimator
        .col_index("x")
        .ok_or_else(|| ExampleError::Config("view lacks column x".into()))?;
    let ia = estimator
        .col_index("a")
        .ok_or_else(|| ExampleError::Config("view lacks column a".into()))?;
    let iy = estimator
        .col_index("y")
        .ok_or_else(|| ExampleError::Config("view lacks column y".into()))?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..estimator.n() {
        let row = estimator.row(i);
        if row[ia] > 0.5 {
            xs.push(row[ix]);
            ys.push(row[iy]);
        }
    }
    ols_line(&xs, &ys)
}

/// Builds the bundle under a caller-chosen working missingness model.
pub fn mnar_bundle(working_eta2: impl Fn(f64) -> f64 + Send + Sync + 'static) -> ExampleBundle {
    let eta2: Arc<dyn Fn(f64) -> f64 + Send + Sync> = Arc::new(working_eta2);
    let quad = Arc::new(MnarQuad::new(eta2));
    let domain = Domain::interval(Y_LO, Y_HI).expect("constant bounds");

    // estimator view columns
    const IX: usize = 0;
    const IA: usize = 1;
    const IY: usize = 2;

    let q_left = quad.clone();
    let left = Arc::new(
        move |obs: &[f64], beta: &[f64], pts: &[f64], dim: usize, out: &mut [f64]| {
            let mu = beta[0] + beta[1] * obs[IX];
            let (den, _) = q_left.nuisance(mu);
            for (k, o) in out.iter_mut().enumerate() {
                let s = pts[k * dim];
                *o = normal_pdf(s, mu) * (q_left.eta2)(s) / den;
            }
        },
    );
    let right = Arc::new(
        move |obs: &[f64], beta: &[f64], pts: &[f64], dim: usize, out: &mut [f64]| {
            let mu = beta[0] + beta[1] * obs[IX];
            for (k, o) in out.iter_mut().enumerate() {
                *o = normal_pdf(pts[k * dim], mu);
            }
        },
    );

    let q_forcing = quad.clone();
    let forcing = Arc::new(
        move |obs: &[f64], beta: &[f64], pts: &[f64], dim: usize, out: &mut [f64]| {
            let x = obs[IX];
            let mu = beta[0] + beta[1] * x;
            let (den, s1) = q_forcing.nuisance(mu);
            let ratio = s1 / den;
            for k in 0..pts.len() / dim {
                let t = pts[k * dim];
                let p = normal_pdf(t, mu);
                // d/dbeta1 of the density is p*(t-mu); d/dbeta2 is x times that
                let c1 = p * (t - mu) + ratio * p;
                out[2 * k] = c1;
                out[2 * k + 1] = x * c1;
            }
        },
    );

    // the governing equation carries +mean_i[p_i(t)] b(t); with alpha = 1
    // that is weight -p_i(t)
    let weight = Arc::new(
        move |obs: &[f64], beta: &[f64], pts: &[f64], dim: usize, out: &mut [f64]| {
            let mu = beta[0] + beta[1] * obs[IX];
            for (k, o) in out.iter_mut().enumerate() {
                *o = -normal_pdf(pts[k * dim], mu);
            }
        },
    );

    let problem = FredholmProblem {
        q: 2,
        mode: ResidualMode::SecondKind,
        s_domain: domain.clone(),
        t_domain: domain,
        kernel: Kernel::Separable(vec![SeparableTerm { left, right }]),
        forcing,
        weight: Some(weight),
        covariates: None,
        averaged: true,
        beta_dependent: true,
    };

    let q_psi = quad.clone();
    let psi = EstimatingEquation {
        q: 2,
        needs_inner: true,
        eval: Arc::new(move |ctx: &PsiCtx, out: &mut [f64]| {
            let x = ctx.obs[IX];
            let mu = ctx.beta[0] + ctx.beta[1] * x;
            if ctx.obs[IA] > 0.5 {
                // observed arm: score minus the b-correction at y
                let y = ctx.obs[IY];
                let mut bv = [0.0; 2];
                ctx.b_at(&[y], &mut bv);
                let r = y - mu;
                out[0] = r - bv[0];
                out[1] = r * x - bv[1];
            } else {
                // missing arm: everything is integrated over the response
                let (den, s1) = q_psi.nuisance(mu);
                let mut pb = [0.0; 2];
                let j2 = ctx.nodes.len() / ctx.node_dim;
                for j in 0..j2 {
                    let s = ctx.nodes[j * ctx.node_dim];
                    let g = normal_pdf(s, mu) * (q_psi.eta2)(s);
                    pb[0] += g * ctx.b_nodes[j * ctx.q_b];
                    pb[1] += g * ctx.b_nodes[j * ctx.q_b + 1];
                }
                pb[0] *= ctx.node_weight;
                pb[1] *= ctx.node_weight;
                out[0] = (-s1 + pb[0]) / den;
                out[1] = (-x * s1 + pb[1]) / den;
            }
        }),
    };

    let generate = Arc::new(move |n: usize, seed: u64| mnar_views(&gen_mnar(n, seed, MNAR_BETA_STAR)));

    ExampleBundle {
        name: "mnar",
        generate,
        problem,
        psi,
        arch: Arch::new(1, 5, 3, 2).expect("static dims"),
        config: BiLevelConfig {
            gamma: 10,
            max_iter: 2000,
            tol_beta: 1e-5,
            tol_omega: 1e-4,
            j1: 1000,
            j2: 1000,
            lr_beta: 1e-2,
            lr_omega: 1e-4,
            fd_step: 1e-5,
            batch: 0,
            seed: 0,
            beta_init: vec![0.0, 0.0],
        },
        beta_star: MNAR_BETA_STAR.to_vec(),
        comparators: vec![Comparator::Polynomial(5), Comparator::Oracle, Comparator::Biased],
        oracle: Some(Arc::new(mnar_oracle)),
        biased: Some(Arc::new(mnar_biased)),
    }
}

/// The bundle under the deliberately misspecified working model
/// eta2(y) = expit(1 - y); the truth is expit(1 + y).
pub fn mnar_default_bundle() -> ExampleBundle {
    mnar_bundle(|y| expit(1.0 - y))
}
