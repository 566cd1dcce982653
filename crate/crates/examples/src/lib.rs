//! Worked estimation problems packaged as ready-to-run bundles.
//!
//! Each bundle couples a data generator, a Fredholm problem for the
//! nuisance function b, an estimating equation for the target parameter,
//! and tuned defaults (architecture, bi-level configuration, reference
//! estimators). The three statistical examples are
//!
//! * `mnar`: Gaussian linear regression with the response missing not at
//!   random, identified through a deliberately misspecified working model
//!   for the missingness mechanism;
//! * `sensitivity`: a binary-outcome causal model with an unobserved
//!   confounder, estimated under a guessed confounder distribution with
//!   Tikhonov regularization;
//! * `shift`: target-population average prediction loss under covariate
//!   shift posterior drift, where the integral equation does not involve
//!   the target parameter and the estimator is a plug-in mean.
//!
//! A fourth family, [`analytic_problems`], provides closed-form fixtures
//! used to validate both solvers.

mod analytic;
mod gen;
mod mnar;
mod sens;
mod shift;

pub use analytic::{analytic_problems, dummy_dataset, AnalyticProblem};
pub use gen::{
    gen_mnar, gen_sens, gen_shift, mnar_views, read_dataset_csv, read_estimator_csv,
    sens_views, shift_views, write_dataset_csv, GeneratedData, MnarObservation,
    SensObservation, ShiftObservation, TRUTH_PREFIX,
};
pub use mnar::{mnar_biased, mnar_bundle, mnar_default_bundle, mnar_oracle, MNAR_BETA_STAR};
pub use sens::{sens_bundle, sens_default_bundle, working_score, SENS_BETA_STAR, SENS_P};
pub use shift::{
    beta_star_shift, beta_star_shift_resolution, rho_star, shift_beta_hat, shift_bundle,
    shift_zeta_solution, zeta_star, ShiftNuisance,
};

use bilevel::{BiLevelConfig, EstimatingEquation};
use fredholm::{Dataset, FredholmError, FredholmProblem};
use nn_core::Arch;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExampleError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("csv error: {0}")]
    Csv(String),
    #[error(transparent)]
    Numeric(#[from] FredholmError),
}

/// Reference estimators run alongside the neural solver.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Comparator {
    /// Polynomial collocation of the given total degree.
    Polynomial(usize),
    /// Full-information estimator; consumes the full data view and may
    /// read ground-truth columns.
    Oracle,
    /// Naive estimator that ignores the identification problem.
    Biased,
}

impl Comparator {
    pub fn label(&self) -> String {
        match self {
            Comparator::Polynomial(d) => format!("poly:{d}"),
            Comparator::Oracle => "oracle".into(),
            Comparator::Biased => "biased".into(),
        }
    }
}

/// Direct estimator over a dataset view, bypassing the integral equation.
pub type DirectEstimator = Arc<dyn Fn(&Dataset) -> Result<Vec<f64>, ExampleError> + Send + Sync>;

/// Everything needed to reproduce one simulation example.
pub struct ExampleBundle {
    pub name: &'static str,
    /// Generates n observations for one replication; returns both views.
    pub generate: Arc<dyn Fn(usize, u64) -> GeneratedData + Send + Sync>,
    pub problem: FredholmProblem,
    pub psi: EstimatingEquation,
    /// Tuned default network shape for the unknown function b.
    pub arch: Arch,
    /// Tuned default bi-level configuration (seed 0; the harness reseeds
    /// per replication).
    pub config: BiLevelConfig,
    pub beta_star: Vec<f64>,
    pub comparators: Vec<Comparator>,
    /// `Comparator::Oracle` implementation; takes the full view.
    pub oracle: Option<DirectEstimator>,
    /// `Comparator::Biased` implementation; takes the estimator view.
    pub biased: Option<DirectEstimator>,
}

pub fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Composite Simpson nodes and weights: `panels` must be even and >= 2.
/// Used for the deterministic one-dimensional nuisance integrals that sit
/// inside kernel and forcing closures (the engine's Monte Carlo grid is
/// reserved for integrals against b).
pub(crate) fn simpson_rule(lo: f64, hi: f64, panels: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(panels >= 2 && panels % 2 == 0, "composite Simpson needs an even panel count");
    let h = (hi - lo) / panels as f64;
    let n = panels + 1;
    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for k in 0..n {
        nodes.push(lo + h * k as f64);
        let w = if k == 0 || k == panels {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        weights.push(w * h / 3.0);
    }
    (nodes, weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_integrates_cubics_exactly() {
        let (nodes, weights) = simpson_rule(-1.0, 2.0, 10);
        let integral: f64 = nodes
            .iter()
            .zip(&weights)
            .map(|(&x, &w)| w * (x * x * x - 2.0 * x + 1.0))
            .sum();
        // antiderivative x^4/4 - x^2 + x over [-1, 2]
        let exact = (4.0 - 4.0 + 2.0) - (0.25 - 1.0 - 1.0);
        assert!((integral - exact).abs() < 1e-12, "{integral} vs {exact}");
    }

    #[test]
    fn expit_matches_identities() {
        assert!((expit(0.0) - 0.5).abs() < 1e-15);
        for x in [-3.0, -0.7, 0.0, 1.3, 5.0] {
            assert!((expit(x) + expit(-x) - 1.0).abs() < 1e-15);
        }
    }
}
