//! Closed-form integral equations for solver validation.
//!
//! Each fixture pairs a [`FredholmProblem`] with its exact solution so a
//! solver's residual and recovery error can be checked without any
//! statistical machinery. The closures ignore the observation row; use
//! [`dummy_dataset`] to drive them.

use fredholm::closures::{forcing_scalar, node_fn};
use fredholm::{Dataset, FnSolution, FredholmProblem, Kernel, ResidualMode, SeparableTerm, SolutionFn};
use quadrature::Domain;
use std::sync::Arc;

pub struct AnalyticProblem {
    pub id: &'static str,
    pub problem: FredholmProblem,
    pub solution: Arc<dyn SolutionFn>,
}

fn scalar_solution(f: fn(f64) -> f64) -> Arc<dyn SolutionFn> {
    Arc::new(FnSolution {
        q: 1,
        input_dim: 1,
        f: move |pt: &[f64], out: &mut [f64]| out[0] = f(pt[0]),
    })
}

fn unit_problem(kernel: Kernel, mode: ResidualMode, forcing: fredholm::ForcingFn) -> FredholmProblem {
    let domain = Domain::interval(0.0, 1.0).expect("constant bounds");
    FredholmProblem {
        q: 1,
        mode,
        s_domain: domain.clone(),
        t_domain: domain,
        kernel,
        forcing,
        weight: None,
        covariates: None,
        averaged: false,
        beta_dependent: false,
    }
}

/// Single-row placeholder dataset for observation-free problems.
pub fn dummy_dataset() -> Dataset {
    Dataset::from_rows(vec!["x".into()], &[vec![0.0]]).expect("static shape")
}

/// Three problems with known solutions on [0, 1]:
///
/// 1. `degenerate`: K(s,t) = st/2 (rank one) with C(t) = -(5/6) t; since
///    int_0^1 (st/2) s ds = t/6, the residual at b(t) = t is
///    t/6 + 5t/6 - t = 0.
/// 2. `zero`: K = 0, so b(t) = -C(t) = -(1 - 2t + 3t^2).
/// 3. `ridge`: K = 0 with the lambda-regularized mode; the residual
///    -C + lambda b vanishes at b = C/lambda.
pub fn analytic_problems() -> Vec<AnalyticProblem> {
    let degenerate = AnalyticProblem {
        id: "degenerate",
        problem: unit_problem(
            Kernel::Separable(vec![SeparableTerm {
                left: node_fn(|s| s[0] / 2.0),
                right: node_fn(|t| t[0]),
            }]),
            ResidualMode::SecondKind,
            forcing_scalar(|t| -(5.0 / 6.0) * t[0]),
        ),
        solution: scalar_solution(|t| t),
    };

    let zero = AnalyticProblem {
        id: "zero",
        problem: unit_problem(
            Kernel::Zero,
            ResidualMode::SecondKind,
            forcing_scalar(|t| 1.0 - 2.0 * t[0] + 3.0 * t[0] * t[0]),
        ),
        solution: scalar_solution(|t| -(1.0 - 2.0 * t + 3.0 * t * t)),
    };

    let lambda = 0.5;
    let ridge = AnalyticProblem {
        id: "ridge",
        problem: unit_problem(
            Kernel::Zero,
            ResidualMode::Tikhonov { lambda },
            forcing_scalar(|t| t[0] * t[0] + 1.0),
        ),
        solution: scalar_solution(|t| (t * t + 1.0) / 0.5),
    };

    vec![degenerate, zero, ridge]
}
