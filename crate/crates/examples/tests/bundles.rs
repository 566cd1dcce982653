//! End-to-end alternation on each bundle at throwaway scale: these
//! confirm the plumbing (layouts, closures, seeds) without asserting
//! statistical quality.

use bilevel::{dna_se, dna_se_decoupled, dna_se_poly};
use examples::{mnar_default_bundle, sens_default_bundle, shift_bundle, zeta_star};
use nn_core::Arch;

#[test]
fn mnar_alternation_runs_and_traces() {
    let bundle = mnar_default_bundle();
    let data = (bundle.generate)(60, 7).estimator;
    let mut cfg = bundle.config.clone();
    cfg.max_iter = 40;
    cfg.gamma = 3;
    cfg.j1 = 24;
    cfg.j2 = 24;
    cfg.seed = 9;
    let report = dna_se(&bundle.problem, &bundle.psi, &data, bundle.arch, &cfg).unwrap();
    assert_eq!(report.beta_hat.len(), 2);
    assert!(report.beta_hat.iter().all(|b| b.is_finite()));
    assert!(!report.trace.is_empty());
    assert!(report.trace.len() <= 40);
    assert!(report.final_loss_k.is_finite());
    assert!(report.final_loss_psi.is_finite());
    // the first trace row carries the initial point
    assert_eq!(report.trace[0].beta, vec![0.0, 0.0]);
}

#[test]
fn mnar_polynomial_solver_also_runs() {
    let bundle = mnar_default_bundle();
    let data = (bundle.generate)(50, 19).estimator;
    let mut cfg = bundle.config.clone();
    cfg.max_iter = 30;
    cfg.gamma = 2;
    cfg.j1 = 24;
    cfg.j2 = 24;
    let report = dna_se_poly(&bundle.problem, &bundle.psi, &data, 3, &cfg).unwrap();
    assert!(report.beta_hat.iter().all(|b| b.is_finite()));
}

#[test]
fn sens_alternation_runs_with_covariate_inputs() {
    let bundle = sens_default_bundle();
    let data = (bundle.generate)(40, 3).estimator;
    let mut cfg = bundle.config.clone();
    cfg.max_iter = 12;
    cfg.gamma = 2;
    cfg.j1 = 16;
    cfg.j2 = 16;
    cfg.batch = 16;
    // small stand-in for the production architecture
    let arch = Arch::new(11, 8, 2, 1).unwrap();
    let report = dna_se(&bundle.problem, &bundle.psi, &data, arch, &cfg).unwrap();
    assert_eq!(report.beta_hat.len(), 1);
    assert!(report.beta_hat[0].is_finite());
    assert!(report.final_loss_k.is_finite());
}

#[test]
fn shift_decoupled_and_alternating_agree_loosely() {
    let bundle = shift_bundle();
    let data = (bundle.generate)(400, 11).estimator;
    let mut cfg = bundle.config.clone();
    cfg.max_iter = 400;
    cfg.j1 = 64;
    cfg.j2 = 8;
    cfg.seed = 4;
    let alt = dna_se(&bundle.problem, &bundle.psi, &data, bundle.arch, &cfg).unwrap();
    let dec = dna_se_decoupled(&bundle.problem, &bundle.psi, &data, bundle.arch, &cfg).unwrap();
    assert!(alt.beta_hat[0].is_finite());
    assert!(dec.beta_hat[0].is_finite());
    // both chase the same plug-in mean; at this scale they should land
    // in the same neighborhood
    assert!(
        (alt.beta_hat[0] - dec.beta_hat[0]).abs() <= 0.05,
        "alternating {} vs decoupled {}",
        alt.beta_hat[0],
        dec.beta_hat[0]
    );
    // and the zeta being fit is order-one negative on [1,3]
    let z = zeta_star(2.0);
    assert!(z < 0.0 && z.abs() < 5.0, "zeta*(2) = {z}");
}
