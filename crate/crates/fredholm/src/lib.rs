//! Parameterized Fredholm integral problems and two interchangeable
//! solvers for the unknown function b.
//!
//! A problem couples a kernel K(s,t,O;beta), a forcing term C(t,O;beta),
//! an optional scalar weight w(t,O;beta) on the b-term (default 1), and a
//! residual mode. The unified residual at an outer node t is
//!
//! ```text
//! R(t,O) = mc_integral_s[ K(s,t,O;beta) * b(s,O) ] - C(t,O;beta) - alpha * w(t,O;beta) * b(t,O)
//! ```
//!
//! with alpha = 1 for second-kind equations and alpha = -lambda for
//! Tikhonov-regularized first-kind equations. The inner loss averages the
//! squared residual over outer nodes (weight 1/J1, i.e. the outer measure
//! is normalized uniform) and over observations.
//!
//! Kernels whose (s,t) dependence factors per observation are declared as
//! sums of separable terms; the engine then applies them in
//! O(terms * N * (J1 + J2)) instead of O(N * J1 * J2). Problems whose
//! kernel/forcing/weight enter the equation only through their dataset
//! means set `averaged`, which collapses the residual to a single shared
//! row per outer node.

mod engine;
mod neural;
mod poly;

pub use engine::{loss_k, residual, residual_rows, ResidualRows};
pub use neural::solve_neural_steps;
pub use poly::{solve_polynomial, PolynomialCoefficients};

use quadrature::{Domain, QuadratureError};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FredholmError {
    #[error("non-finite {what} at node {index}: {detail}")]
    NonFinite { what: &'static str, index: usize, detail: String },
    #[error("invalid problem: {0}")]
    Problem(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
}

/// Rectangular table of observations, one row per observation.
#[derive(Clone, Debug)]
pub struct Dataset {
    names: Vec<String>,
    cols: usize,
    data: Vec<f64>,
}

impl Dataset {
    pub fn new(names: Vec<String>, data: Vec<f64>) -> Result<Self, FredholmError> {
        let cols = names.len();
        if cols == 0 || data.len() % cols != 0 {
            return Err(FredholmError::Config(format!(
                "data length {} is not a multiple of {} columns",
                data.len(),
                cols
            )));
        }
        Ok(Dataset { names, cols, data })
    }

    pub fn from_rows(names: Vec<String>, rows: &[Vec<f64>]) -> Result<Self, FredholmError> {
        let cols = names.len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(FredholmError::Config(format!(
                    "row has {} values, expected {}",
                    r.len(),
                    cols
                )));
            }
            data.extend_from_slice(r);
        }
        Dataset::new(names, data)
    }

    pub fn n(&self) -> usize {
        self.data.len() / self.cols
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }
}

/// Residual mode of the governed equation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ResidualMode {
    /// `int K b ds = C + w*b`
    SecondKind,
    /// `int K b ds = C - lambda*w*b`
    Tikhonov { lambda: f64 },
}

impl ResidualMode {
    /// Coefficient on the `w*b` term of the unified residual.
    pub fn alpha(self) -> f64 {
        match self {
            ResidualMode::SecondKind => 1.0,
            ResidualMode::Tikhonov { lambda } => -lambda,
        }
    }
}

/// Fills `out[k] = f(pts[k], obs, beta)` for a row-major block of points.
/// Used for separable kernel factors and the scalar b-weight.
pub type NodeFn =
    Arc<dyn Fn(&[f64], &[f64], &[f64], usize, &mut [f64]) + Send + Sync>;

/// Fills `out[k*q + c] = C_c(pts[k], obs, beta)`.
pub type ForcingFn =
    Arc<dyn Fn(&[f64], &[f64], &[f64], usize, &mut [f64]) + Send + Sync>;

/// Pointwise kernel K(s, t, obs, beta).
pub type PointKernelFn = Arc<dyn Fn(&[f64], &[f64], &[f64], &[f64]) -> f64 + Send + Sync>;

/// Appends the observation covariates that form part of b's argument.
pub type CovFn = Arc<dyn Fn(&[f64], &mut Vec<f64>) + Send + Sync>;

/// One separable kernel term K_m(s,t,O;beta) = left(s,O,beta) * right(t,O,beta).
#[derive(Clone)]
pub struct SeparableTerm {
    pub left: NodeFn,
    pub right: NodeFn,
}

#[derive(Clone)]
pub enum Kernel {
    Zero,
    Pointwise(PointKernelFn),
    /// Sum of separable terms; the engine exploits the factorization.
    Separable(Vec<SeparableTerm>),
}

#[derive(Clone)]
pub struct FredholmProblem {
    /// Output dimension of b (and of C).
    pub q: usize,
    pub mode: ResidualMode,
    pub s_domain: Domain,
    pub t_domain: Domain,
    pub kernel: Kernel,
    pub forcing: ForcingFn,
    /// Scalar multiplier on the b-term; `None` means 1.
    pub weight: Option<NodeFn>,
    /// Covariates appended to the function argument of b; `None` means b
    /// takes the node coordinates only.
    pub covariates: Option<CovFn>,
    /// When set, kernel/forcing/weight enter through their dataset means:
    /// the residual is a single shared row over outer nodes.
    pub averaged: bool,
    /// False when K, C, w do not depend on beta (decouples the bilevel loop).
    pub beta_dependent: bool,
}

impl FredholmProblem {
    pub fn validate(&self) -> Result<(), FredholmError> {
        if self.q == 0 {
            return Err(FredholmError::Problem("q must be >= 1".into()));
        }
        if self.s_domain.dim() != self.t_domain.dim() {
            return Err(FredholmError::Problem(
                "s and t domains must share a dimension (b is one function of that argument)"
                    .into(),
            ));
        }
        if self.averaged && self.covariates.is_some() {
            return Err(FredholmError::Problem(
                "averaged problems take a shared b with no per-observation covariates".into(),
            ));
        }
        Ok(())
    }

    /// Dimension of b's input: node coordinates plus covariates.
    pub fn b_input_dim(&self, probe_obs: &[f64]) -> usize {
        let mut d = self.s_domain.dim();
        if let Some(cov) = &self.covariates {
            let mut buf = Vec::new();
            cov(probe_obs, &mut buf);
            d += buf.len();
        }
        d
    }
}

/// An evaluable estimate of the unknown function b.
pub trait SolutionFn: Send + Sync {
    fn q(&self) -> usize;
    fn input_dim(&self) -> usize;
    /// `pts` is row-major `k x input_dim`; `out` is resized to `k x q`.
    fn eval_rows(&self, pts: &[f64], out: &mut Vec<f64>);
    fn eval_one(&self, pt: &[f64], out: &mut [f64]) {
        let mut buf = Vec::with_capacity(self.q());
        self.eval_rows(pt, &mut buf);
        out.copy_from_slice(&buf);
    }
}

/// Neural-network-backed solution.
pub struct NeuralSolution {
    pub net: nn_core::Mlp,
}

impl SolutionFn for NeuralSolution {
    fn q(&self) -> usize {
        self.net.arch().output
    }
    fn input_dim(&self) -> usize {
        self.net.arch().input
    }
    fn eval_rows(&self, pts: &[f64], out: &mut Vec<f64>) {
        let d = self.net.arch().input;
        assert!(pts.len() % d == 0, "point block not a multiple of input dim");
        let rows = pts.len() / d;
        let mut scratch = nn_core::Scratch::default();
        self.net.forward_scratch(pts, rows, &mut scratch, out);
    }
}

impl SolutionFn for PolynomialCoefficients {
    fn q(&self) -> usize {
        self.q
    }
    fn input_dim(&self) -> usize {
        self.input_dim
    }
    fn eval_rows(&self, pts: &[f64], out: &mut Vec<f64>) {
        self.eval_rows_impl(pts, out)
    }
}

/// Closure-backed solution, used for closed-form references in tests.
pub struct FnSolution<F: Fn(&[f64], &mut [f64]) + Send + Sync> {
    pub q: usize,
    pub input_dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64], &mut [f64]) + Send + Sync> SolutionFn for FnSolution<F> {
    fn q(&self) -> usize {
        self.q
    }
    fn input_dim(&self) -> usize {
        self.input_dim
    }
    fn eval_rows(&self, pts: &[f64], out: &mut Vec<f64>) {
        let rows = pts.len() / self.input_dim;
        out.resize(rows * self.q, 0.0);
        for r in 0..rows {
            let pt = &pts[r * self.input_dim..(r + 1) * self.input_dim];
            (self.f)(pt, &mut out[r * self.q..(r + 1) * self.q]);
        }
    }
}

/// Convenience constructors for closures that ignore the observation.
pub mod closures {
    use super::*;

    /// NodeFn from a scalar function of the node alone.
    pub fn node_fn(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> NodeFn {
        Arc::new(move |_obs, _beta, pts, dim, out| {
            for (k, o) in out.iter_mut().enumerate() {
                *o = f(&pts[k * dim..(k + 1) * dim]);
            }
        })
    }

    /// ForcingFn (q = 1) from a scalar function of the node alone.
    pub fn forcing_scalar(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> ForcingFn {
        Arc::new(move |_obs, _beta, pts, dim, out| {
            for k in 0..pts.len() / dim {
                out[k] = f(&pts[k * dim..(k + 1) * dim]);
            }
        })
    }
}
