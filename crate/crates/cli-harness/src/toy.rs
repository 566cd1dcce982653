//! Smallest end-to-end example: the estimand is a Gaussian mean and the
//! inner equation has the closed form b(t) = -t, so both loops run in
//! milliseconds with known answers. Used for smoke tests and CLI demos.

use std::sync::Arc;

use bilevel::{BiLevelConfig, EstimatingEquation};
use examples::{ExampleBundle, GeneratedData};
use fredholm::closures::forcing_scalar;
use fredholm::{Dataset, FredholmProblem, Kernel, ResidualMode};
use nn_core::Arch;
use quadrature::{Domain, Rng};

pub const TOY_BETA_STAR: f64 = 1.5;

/// y ~ Normal(beta_star, 0.25); both views are identical because nothing
/// is hidden.
pub fn gen_toy(n: usize, seed: u64) -> GeneratedData {
    let mut rng = Rng::from_seed(seed);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| vec![TOY_BETA_STAR + 0.5 * rng.normal()])
        .collect();
    let data = Dataset::from_rows(vec!["y".into()], &rows).expect("fixed shape");
    GeneratedData { estimator: data.clone(), full: data }
}

/// K = 0 with forcing C(t) = t, so the inner solution is b(t) = -t; the
/// estimating equation psi = y - beta ignores b, making beta_hat the sample
/// mean while both optimizers still exercise their full update paths.
pub fn toy_bundle() -> ExampleBundle {
    let domain = Domain::interval(0.0, 1.0).expect("constant bounds");
    let problem = FredholmProblem {
        q: 1,
        mode: ResidualMode::SecondKind,
        s_domain: domain.clone(),
        t_domain: domain,
        kernel: Kernel::Zero,
        forcing: forcing_scalar(|t| t[0]),
        weight: None,
        covariates: None,
        averaged: true,
        beta_dependent: false,
    };
    let psi = EstimatingEquation {
        q: 1,
        needs_inner: false,
        eval: Arc::new(|ctx, out: &mut [f64]| out[0] = ctx.obs[0] - ctx.beta[0]),
    };
    ExampleBundle {
        name: "toy",
        generate: Arc::new(gen_toy),
        problem,
        psi,
        arch: Arch::new(1, 4, 1, 1).expect("static shape"),
        config: BiLevelConfig {
            gamma: 2,
            max_iter: 500,
            tol_beta: 1e-4,
            tol_omega: 1e-3,
            j1: 16,
            j2: 8,
            lr_beta: 0.05,
            lr_omega: 3e-3,
            fd_step: 1e-5,
            batch: 0,
            seed: 0,
            beta_init: vec![0.0],
        },
        beta_star: vec![TOY_BETA_STAR],
        comparators: Vec::new(),
        oracle: None,
        biased: None,
    }
}
