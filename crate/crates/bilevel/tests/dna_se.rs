use bilevel::{
    dna_se, dna_se_decoupled, dna_se_poly, grad_beta, loss_psi, BiLevelConfig, BiLevelError,
    EstimatingEquation,
};
use fredholm::{closures, Dataset, FnSolution, FredholmProblem, Kernel, ResidualMode};
use nn_core::Arch;
use quadrature::{sample_grid, Domain, QuadratureGrid};
use std::sync::Arc;

fn unit() -> Domain {
    Domain::interval(0.0, 1.0).unwrap()
}

/// K = 0, C = -1, SecondKind: residual = 1 - b, so b* = 1 everywhere.
fn constant_problem() -> FredholmProblem {
    FredholmProblem {
        q: 1,
        mode: ResidualMode::SecondKind,
        s_domain: unit(),
        t_domain: unit(),
        kernel: Kernel::Zero,
        forcing: closures::forcing_scalar(|_| -1.0),
        weight: None,
        covariates: None,
        averaged: false,
        beta_dependent: false,
    }
}

/// psi(O, beta, b) = beta - b(0.3); root is beta = b*(0.3) = 1.
fn probe_psi() -> EstimatingEquation {
    EstimatingEquation {
        q: 1,
        needs_inner: false,
        eval: Arc::new(|ctx, out| {
            let mut b = [0.0];
            ctx.b_at(&[0.3], &mut b);
            out[0] = ctx.beta[0] - b[0];
        }),
    }
}

/// psi(O, beta) = beta - O, ignoring b.
fn mean_shift_psi(scale: f64) -> EstimatingEquation {
    EstimatingEquation {
        q: 1,
        needs_inner: false,
        eval: Arc::new(move |ctx, out| out[0] = scale * (ctx.beta[0] - ctx.obs[0])),
    }
}

fn obs_123() -> Dataset {
    Dataset::from_rows(vec!["o".into()], &[vec![1.0], vec![2.0], vec![3.0]]).unwrap()
}

fn small_grid() -> QuadratureGrid {
    sample_grid(&unit(), &unit(), 8, 8, 5).unwrap()
}

fn zero_solution() -> FnSolution<impl Fn(&[f64], &mut [f64]) + Send + Sync> {
    FnSolution { q: 1, input_dim: 1, f: |_: &[f64], out: &mut [f64]| out[0] = 0.0 }
}

fn toy_cfg(seed: u64) -> BiLevelConfig {
    BiLevelConfig {
        gamma: 10,
        max_iter: 3000,
        j1: 32,
        j2: 8,
        lr_omega: 1e-3,
        // the weight-vector norm settles an order of magnitude above the
        // beta norm on this toy; gate it at its own scale
        tol_omega: 1e-4,
        seed,
        beta_init: vec![0.0],
        ..BiLevelConfig::default()
    }
}

#[test]
fn loss_psi_matches_hand_values() {
    let p = constant_problem();
    let data = obs_123();
    let grid = small_grid();
    let b = zero_solution();

    let zero = EstimatingEquation {
        q: 1,
        needs_inner: false,
        eval: Arc::new(|_, out| out[0] = 0.0),
    };
    assert_eq!(loss_psi(&zero, &[0.7], &b, &p, &data, &grid).unwrap(), 0.0);

    let psi = mean_shift_psi(1.0);
    assert_eq!(loss_psi(&psi, &[2.0], &b, &p, &data, &grid).unwrap(), 0.0);
    assert_eq!(loss_psi(&psi, &[0.0], &b, &p, &data, &grid).unwrap(), 4.0);
}

#[test]
fn grad_beta_matches_analytic_derivative() {
    let p = constant_problem();
    let data = obs_123();
    let grid = small_grid();
    let b = zero_solution();
    let psi = mean_shift_psi(1.0);

    // L(beta) = (beta - 2)^2, so L'(0) = -4; central differences of a
    // quadratic are exact up to rounding
    let g = grad_beta(&psi, &[0.0], &b, &p, &data, &grid, 1e-5).unwrap();
    assert!((g[0] + 4.0).abs() <= 1e-8, "{}", g[0]);

    // at the root the gradient vanishes
    let g = grad_beta(&psi, &[2.0], &b, &p, &data, &grid, 1e-5).unwrap();
    assert!(g[0].abs() <= 1e-9, "{}", g[0]);

    // permuting observations leaves the gradient unchanged up to rounding
    let perm = Dataset::from_rows(vec!["o".into()], &[vec![3.0], vec![1.0], vec![2.0]]).unwrap();
    let g1 = grad_beta(&psi, &[0.4], &b, &p, &data, &grid, 1e-5).unwrap();
    let g2 = grad_beta(&psi, &[0.4], &b, &p, &perm, &grid, 1e-5).unwrap();
    assert!((g1[0] - g2[0]).abs() <= 1e-9);
}

#[test]
fn toy_fixed_point_converges_to_one() {
    let p = constant_problem();
    let psi = probe_psi();
    let data = obs_123();
    let cfg = toy_cfg(29);
    let report = dna_se(&p, &psi, &data, Arch::new(1, 4, 2, 1).unwrap(), &cfg).unwrap();
    assert!(report.converged, "did not converge in {} iterations (step norms {:.2e}/{:.2e})",
        report.iterations, report.step_norm_beta, report.step_norm_omega);
    assert!(
        (report.beta_hat[0] - 1.0).abs() <= 1e-2,
        "beta_hat {}",
        report.beta_hat[0]
    );
    assert!(report.step_norm_beta < cfg.tol_beta);
    assert!(report.step_norm_omega < cfg.tol_omega);
    assert_eq!(report.trace.len(), report.iterations);
    assert_eq!(report.trace[0].beta, vec![0.0]);
    assert_eq!(report.trace[0].iter, 1);
}

#[test]
fn poly_updater_solves_toy_exactly() {
    let p = constant_problem();
    let psi = probe_psi();
    let data = obs_123();
    let cfg = toy_cfg(13);
    let report = dna_se_poly(&p, &psi, &data, 1, &cfg).unwrap();
    assert!(report.converged);
    assert!(
        (report.beta_hat[0] - 1.0).abs() <= 1e-2,
        "beta_hat {}",
        report.beta_hat[0]
    );
    // the exact inner solver nails b* = 1 immediately, so the final inner
    // loss is machine zero
    assert!(report.final_loss_k <= 1e-20, "{}", report.final_loss_k);
}

#[test]
fn identical_configs_give_identical_reports() {
    let p = constant_problem();
    let psi = probe_psi();
    let data = obs_123();
    let cfg = toy_cfg(29);
    let a = dna_se(&p, &psi, &data, Arch::new(1, 4, 2, 1).unwrap(), &cfg).unwrap();
    let b = dna_se(&p, &psi, &data, Arch::new(1, 4, 2, 1).unwrap(), &cfg).unwrap();
    assert_eq!(a, b);

    let c = dna_se(&p, &psi, &data, Arch::new(1, 4, 2, 1).unwrap(), &BiLevelConfig { seed: 30, ..cfg }).unwrap();
    assert_ne!(a, c, "different seed should give a different run");
}

#[test]
fn gamma_zero_is_a_config_error() {
    let cfg = BiLevelConfig {
        gamma: 0,
        beta_init: vec![0.0],
        ..BiLevelConfig::default()
    };
    let err = dna_se(
        &constant_problem(),
        &probe_psi(),
        &obs_123(),
        Arch::new(1, 4, 2, 1).unwrap(),
        &cfg,
    )
    .unwrap_err();
    assert!(matches!(err, BiLevelError::Config(_)), "{err}");
}

#[test]
fn beta_init_length_mismatch_is_a_config_error() {
    let cfg = BiLevelConfig {
        beta_init: vec![0.0, 0.0],
        ..toy_cfg(1)
    };
    let err = dna_se(
        &constant_problem(),
        &probe_psi(),
        &obs_123(),
        Arch::new(1, 4, 2, 1).unwrap(),
        &cfg,
    )
    .unwrap_err();
    assert!(matches!(err, BiLevelError::Config(_)), "{err}");
}

#[test]
fn divergent_outer_loss_errors_with_trace() {
    let p = constant_problem();
    let psi = mean_shift_psi(1e7);
    let data = obs_123();
    let cfg = toy_cfg(3);
    let err = dna_se(&p, &psi, &data, Arch::new(1, 4, 2, 1).unwrap(), &cfg).unwrap_err();
    match err {
        BiLevelError::Divergence { iterations, trace, .. } => {
            assert_eq!(iterations, 1);
            assert_eq!(trace.len(), 1);
            assert!(trace[0].loss_psi > 1e12);
        }
        other => panic!("expected divergence, got {other}"),
    }
}

#[test]
fn trace_csv_has_header_and_one_row_per_iteration() {
    let p = constant_problem();
    let psi = probe_psi();
    let data = obs_123();
    let report = dna_se(&p, &psi, &data, Arch::new(1, 4, 2, 1).unwrap(), &toy_cfg(29)).unwrap();
    let csv = report.trace_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "iter,beta_1,loss_psi,loss_K");
    assert_eq!(lines.count(), report.iterations);
    let second = csv.lines().nth(1).unwrap();
    assert!(second.starts_with("1,0,"), "first data row {second}");
}

#[test]
fn decoupled_path_agrees_with_alternating_path() {
    let p = constant_problem();
    let psi = probe_psi();
    let data = obs_123();
    let cfg = toy_cfg(29);
    let alt = dna_se(&p, &psi, &data, Arch::new(1, 4, 2, 1).unwrap(), &cfg).unwrap();
    let dec = dna_se_decoupled(&p, &psi, &data, Arch::new(1, 4, 2, 1).unwrap(), &cfg).unwrap();
    assert!(dec.converged);
    assert!(
        (alt.beta_hat[0] - dec.beta_hat[0]).abs() <= 1e-3,
        "alternating {} vs decoupled {}",
        alt.beta_hat[0],
        dec.beta_hat[0]
    );
}

#[test]
fn decoupled_path_rejects_beta_dependent_problems() {
    let mut p = constant_problem();
    p.beta_dependent = true;
    let err = dna_se_decoupled(
        &p,
        &probe_psi(),
        &obs_123(),
        Arch::new(1, 4, 2, 1).unwrap(),
        &toy_cfg(1),
    )
    .unwrap_err();
    assert!(matches!(err, BiLevelError::Config(_)));
}
