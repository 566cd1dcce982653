//! End-to-end solver checks on problems with closed-form solutions.

use fredholm::{
    closures, loss_k, residual, solve_neural_steps, solve_polynomial, Dataset, FnSolution,
    FredholmProblem, Kernel, NeuralSolution, ResidualMode, SeparableTerm, SolutionFn,
};
use nn_core::{Adam, Arch, Mlp};
use quadrature::{sample_grid, Domain, QuadratureGrid, Rng};
use std::sync::Arc;

fn unit() -> Domain {
    Domain::interval(0.0, 1.0).unwrap()
}

fn dummy() -> Dataset {
    Dataset::new(vec!["z".into()], vec![0.0]).unwrap()
}

/// Inner nodes at the two-point Gauss-Legendre abscissae of [0,1], which
/// integrate quadratics exactly, so b(s) = s solves the discretized
/// degenerate-kernel equation to machine precision. Outer nodes equispaced
/// including both endpoints so sup-norm checks are not extrapolating.
fn gauss2_grid(j1: usize) -> QuadratureGrid {
    let half = 1.0 / (2.0 * 3f64.sqrt());
    let outer: Vec<f64> = (0..j1).map(|l| l as f64 / (j1 - 1) as f64).collect();
    QuadratureGrid::with_nodes(outer, vec![0.5 - half, 0.5 + half], unit(), unit())
}

/// K(s,t) = s*t/2 on [0,1]^2 with C(t) = -(5/6)t; exact solution b(s) = s.
fn degenerate() -> FredholmProblem {
    FredholmProblem {
        q: 1,
        mode: ResidualMode::SecondKind,
        s_domain: unit(),
        t_domain: unit(),
        kernel: Kernel::Separable(vec![SeparableTerm {
            left: closures::node_fn(|s| s[0]),
            right: closures::node_fn(|t| 0.5 * t[0]),
        }]),
        forcing: closures::forcing_scalar(|t| -(5.0 / 6.0) * t[0]),
        weight: None,
        covariates: None,
        averaged: false,
        beta_dependent: false,
    }
}

fn zero_kernel(mode: ResidualMode, c: impl Fn(f64) -> f64 + Send + Sync + 'static) -> FredholmProblem {
    FredholmProblem {
        q: 1,
        mode,
        s_domain: unit(),
        t_domain: unit(),
        kernel: Kernel::Zero,
        forcing: closures::forcing_scalar(move |t| c(t[0])),
        weight: None,
        covariates: None,
        averaged: false,
        beta_dependent: false,
    }
}

fn line_solution(slope: f64, intercept: f64) -> FnSolution<impl Fn(&[f64], &mut [f64]) + Send + Sync>
{
    FnSolution { q: 1, input_dim: 1, f: move |p: &[f64], o: &mut [f64]| o[0] = intercept + slope * p[0] }
}

#[test]
fn residual_vanishes_at_closed_form_solutions() {
    let grid = gauss2_grid(16);
    let beta = [0.0];

    // K = 0, SecondKind, b = -C
    let p1 = zero_kernel(ResidualMode::SecondKind, |t| 2.0 - 3.0 * t);
    let b1 = FnSolution { q: 1, input_dim: 1, f: |p: &[f64], o: &mut [f64]| o[0] = -(2.0 - 3.0 * p[0]) };
    // K = 0, Tikhonov(0.5), b = C / lambda = 2C
    let p2 = zero_kernel(ResidualMode::Tikhonov { lambda: 0.5 }, |t| 1.0 + t);
    let b2 = FnSolution { q: 1, input_dim: 1, f: |p: &[f64], o: &mut [f64]| o[0] = 2.0 * (1.0 + p[0]) };
    // degenerate kernel, b(s) = s
    let p3 = degenerate();
    let b3 = line_solution(1.0, 0.0);

    for t in [0.0, 0.17, 0.5, 0.93, 1.0] {
        let r1 = residual(&p1, &b1, &[t], &[0.0], &beta, &grid).unwrap();
        assert!(r1[0].abs() <= 1e-14, "zero-kernel second kind: {r1:?}");
        let r2 = residual(&p2, &b2, &[t], &[0.0], &beta, &grid).unwrap();
        assert!(r2[0].abs() <= 1e-14, "zero-kernel tikhonov: {r2:?}");
        let r3 = residual(&p3, &b3, &[t], &[0.0], &beta, &grid).unwrap();
        assert!(r3[0].abs() <= 1e-14, "degenerate: {r3:?}");
    }
}

#[test]
fn loss_is_machine_zero_at_exact_solution() {
    let grid = gauss2_grid(64);
    let p = degenerate();
    let b = line_solution(1.0, 0.0);
    let loss = loss_k(&p, &b, &dummy(), &[0.0], &grid).unwrap();
    assert!(loss <= 1e-16, "loss {loss}");
}

#[test]
fn loss_with_b_zero_matches_hand_value() {
    // with b = 0 the residual is -C(t) = (5/6)t, so the loss is the node
    // mean of (5/6 t)^2, which tends to 25/108 for uniform t
    let d = unit();
    let grid = sample_grid(&d, &d, 2000, 10, 31).unwrap();
    let p = degenerate();
    let b = line_solution(0.0, 0.0);
    let loss = loss_k(&p, &b, &dummy(), &[0.0], &grid).unwrap();

    let mut hand = 0.0;
    for l in 0..grid.j1() {
        let t = grid.outer_point(l)[0];
        hand += (5.0 / 6.0 * t) * (5.0 / 6.0 * t);
    }
    hand /= grid.j1() as f64;
    assert!((loss - hand).abs() <= 1e-15, "{loss} vs node mean {hand}");
    assert!((loss - 25.0 / 108.0).abs() < 0.02, "{loss} vs 25/108");
}

#[test]
fn polynomial_recovers_identity_on_degenerate_kernel() {
    let grid = gauss2_grid(50);
    let p = degenerate();
    for degree in [1usize, 3, 5] {
        let sol = solve_polynomial(&p, &dummy(), &[0.0], &grid, degree).unwrap();
        assert!(!sol.rank_deficient);
        let loss = loss_k(&p, &sol, &dummy(), &[0.0], &grid).unwrap();
        assert!(loss <= 1e-12, "degree {degree}: loss {loss}");
        // coefficients: (0, 1, 0, ...)
        for (k, c) in sol.coeffs.iter().enumerate() {
            let want = if k == 1 { 1.0 } else { 0.0 };
            assert!((c - want).abs() <= 1e-8, "degree {degree} coeff {k}: {c}");
        }
        let mut out = vec![0.0];
        for i in 0..=1000 {
            let t = i as f64 / 1000.0;
            sol.eval_one(&[t], &mut out);
            assert!((out[0] - t).abs() <= 1e-8, "b({t}) = {}", out[0]);
        }
    }
}

#[test]
fn polynomial_recovers_neg_c_for_zero_kernel() {
    let d = unit();
    let grid = sample_grid(&d, &d, 40, 5, 8).unwrap();
    let p = zero_kernel(ResidualMode::SecondKind, |t| 2.0 - 3.0 * t + t * t * t);
    let sol = solve_polynomial(&p, &dummy(), &[0.0], &grid, 3).unwrap();
    let mut out = vec![0.0];
    for i in 0..=100 {
        let t = i as f64 / 100.0;
        sol.eval_one(&[t], &mut out);
        let want = -(2.0 - 3.0 * t + t * t * t);
        assert!((out[0] - want).abs() <= 1e-10, "b({t}) = {} vs {want}", out[0]);
    }
}

#[test]
fn polynomial_recovers_c_over_lambda_for_tikhonov() {
    let d = unit();
    let grid = sample_grid(&d, &d, 30, 5, 9).unwrap();
    let p = zero_kernel(ResidualMode::Tikhonov { lambda: 0.5 }, |t| 1.0 - 2.0 * t);
    let sol = solve_polynomial(&p, &dummy(), &[0.0], &grid, 2).unwrap();
    let mut out = vec![0.0];
    for i in 0..=100 {
        let t = i as f64 / 100.0;
        sol.eval_one(&[t], &mut out);
        let want = (1.0 - 2.0 * t) / 0.5;
        assert!((out[0] - want).abs() <= 1e-10, "b({t}) = {} vs {want}", out[0]);
    }
}

#[test]
fn polynomial_degree_zero_cannot_fit_identity() {
    let grid = gauss2_grid(50);
    let p = degenerate();
    let sol = solve_polynomial(&p, &dummy(), &[0.0], &grid, 0).unwrap();
    let loss = loss_k(&p, &sol, &dummy(), &[0.0], &grid).unwrap();
    assert!(loss > 1e-4, "constant fit should leave real residual, loss {loss}");
}

#[test]
fn polynomial_solution_is_first_order_optimal() {
    let d = unit();
    let grid = sample_grid(&d, &d, 60, 40, 17).unwrap();
    let p = degenerate();
    let sol = solve_polynomial(&p, &dummy(), &[0.0], &grid, 3).unwrap();
    let base = loss_k(&p, &sol, &dummy(), &[0.0], &grid).unwrap();
    let mut rng = Rng::from_seed(404);
    for trial in 0..20 {
        let dir: Vec<f64> = (0..sol.coeffs.len()).map(|_| rng.normal()).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut bumped = sol.clone();
        for (c, d) in bumped.coeffs.iter_mut().zip(&dir) {
            *c += 1e-3 * d / norm;
        }
        let bumped_loss = loss_k(&p, &bumped, &dummy(), &[0.0], &grid).unwrap();
        assert!(
            bumped_loss >= base - 1e-18,
            "trial {trial}: perturbation decreased loss {base} -> {bumped_loss}"
        );
    }
}

#[test]
fn degree_too_high_is_a_config_error() {
    let grid = gauss2_grid(4);
    let mut p = degenerate();
    // 6 covariates + node coordinate = 7 vars; degree 9 gives C(16,9) = 11440
    p.covariates = Some(Arc::new(|_obs: &[f64], out: &mut Vec<f64>| {
        out.extend_from_slice(&[0.0; 6]);
    }));
    let err = solve_polynomial(&p, &dummy(), &[0.0], &grid, 9).unwrap_err();
    assert!(matches!(err, fredholm::FredholmError::Config(_)), "{err}");
}

#[test]
fn neural_learns_degenerate_solution_and_matches_polynomial() {
    let grid = gauss2_grid(64);
    let p = degenerate();
    let data = dummy();
    let mut rng = Rng::from_seed(6);
    let mut net = Mlp::new(Arch::new(1, 5, 2, 1).unwrap(), &mut rng).unwrap();
    let mut adam = Adam::new(net.n_params(), 1e-3);
    let mut batch_rng = Rng::from_seed(3);
    let loss = solve_neural_steps(
        &p, &data, &[0.0], &grid, &mut net, &mut adam, 5000, 1e-3, 0, &mut batch_rng,
    )
    .unwrap();
    assert!(loss <= 1e-4, "final loss {loss}");

    let sol = NeuralSolution { net };
    let poly = solve_polynomial(&p, &data, &[0.0], &grid, 5).unwrap();
    let mut bn = vec![0.0];
    let mut bp = vec![0.0];
    let mut sup_t = 0.0_f64;
    let mut sup_poly = 0.0_f64;
    for i in 0..=1000 {
        let t = i as f64 / 1000.0;
        sol.eval_one(&[t], &mut bn);
        poly.eval_one(&[t], &mut bp);
        sup_t = sup_t.max((bn[0] - t).abs());
        sup_poly = sup_poly.max((bn[0] - bp[0]).abs());
    }
    assert!(sup_t <= 1e-2, "sup |b - t| = {sup_t}");
    assert!(sup_poly <= 2e-2, "sup |b_nn - b_poly| = {sup_poly}");
}

#[test]
fn lr_zero_leaves_weights_and_loss_unchanged() {
    let grid = gauss2_grid(16);
    let p = degenerate();
    let data = dummy();
    let mut rng = Rng::from_seed(7);
    let mut net = Mlp::new(Arch::new(1, 4, 1, 1).unwrap(), &mut rng).unwrap();
    let before = net.params().to_vec();
    let initial = {
        let sol = NeuralSolution { net: net.clone() };
        loss_k(&p, &sol, &data, &[0.0], &grid).unwrap()
    };
    let mut adam = Adam::new(net.n_params(), 0.0);
    let mut batch_rng = Rng::from_seed(8);
    let loss = solve_neural_steps(
        &p, &data, &[0.0], &grid, &mut net, &mut adam, 50, 0.0, 0, &mut batch_rng,
    )
    .unwrap();
    assert_eq!(net.params(), before.as_slice());
    assert_eq!(loss, initial);
}

#[test]
fn full_batch_training_descends_for_ten_seeds() {
    let grid = gauss2_grid(32);
    let p = degenerate();
    let data = dummy();
    for seed in 0..10 {
        let mut rng = Rng::from_seed(100 + seed);
        let mut net = Mlp::new(Arch::new(1, 5, 2, 1).unwrap(), &mut rng).unwrap();
        let initial = {
            let sol = NeuralSolution { net: net.clone() };
            loss_k(&p, &sol, &data, &[0.0], &grid).unwrap()
        };
        let mut adam = Adam::new(net.n_params(), 1e-3);
        let mut batch_rng = Rng::from_seed(1);
        let fin = solve_neural_steps(
            &p, &data, &[0.0], &grid, &mut net, &mut adam, 300, 1e-3, 0, &mut batch_rng,
        )
        .unwrap();
        assert!(fin < initial, "seed {seed}: {initial} -> {fin}");
    }
}

#[test]
fn minibatch_training_descends() {
    let d = unit();
    let grid = sample_grid(&d, &d, 40, 40, 5).unwrap();
    let p = degenerate();
    let data = dummy();
    let mut rng = Rng::from_seed(55);
    let mut net = Mlp::new(Arch::new(1, 5, 2, 1).unwrap(), &mut rng).unwrap();
    let initial = {
        let sol = NeuralSolution { net: net.clone() };
        loss_k(&p, &sol, &data, &[0.0], &grid).unwrap()
    };
    let mut adam = Adam::new(net.n_params(), 1e-3);
    let mut batch_rng = Rng::from_seed(56);
    let fin = solve_neural_steps(
        &p, &data, &[0.0], &grid, &mut net, &mut adam, 2000, 1e-3, 8, &mut batch_rng,
    )
    .unwrap();
    assert!(fin < initial / 4.0, "{initial} -> {fin}");
}

#[test]
fn zero_steps_is_a_config_error() {
    let grid = gauss2_grid(4);
    let p = degenerate();
    let mut rng = Rng::from_seed(1);
    let mut net = Mlp::new(Arch::new(1, 3, 1, 1).unwrap(), &mut rng).unwrap();
    let mut adam = Adam::new(net.n_params(), 1e-3);
    let mut batch_rng = Rng::from_seed(2);
    let err = solve_neural_steps(
        &p, &dummy(), &[0.0], &grid, &mut net, &mut adam, 0, 1e-3, 0, &mut batch_rng,
    )
    .unwrap_err();
    assert!(matches!(err, fredholm::FredholmError::Config(_)));
}
