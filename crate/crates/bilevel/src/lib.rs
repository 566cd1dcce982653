//! Alternating bi-level estimation: one Adam step on the outer loss
//! `L_psi(beta) = ||mean_i psi(O_i, beta, b)||^2` with the solution b frozen,
//! then `gamma` solver steps on the inner residual loss `L_K` with beta
//! frozen, repeated until both step norms fall below tolerance.

use fredholm::{
    loss_k, solve_neural_steps, solve_polynomial, Dataset, FredholmError, FredholmProblem,
    NeuralSolution, PolynomialCoefficients, SolutionFn,
};
use nn_core::{Adam, Arch, Mlp};
use quadrature::{derive_seed, sample_grid, QuadratureGrid, Rng};
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::{Duration, Instant};
use thiserror::Error;

/// Purpose tags for deriving independent seed streams from one base seed.
pub mod seeds {
    pub const DATA: u64 = 1;
    pub const GRID: u64 = 2;
    pub const NET: u64 = 3;
    pub const BATCH: u64 = 4;
}

const DIVERGENCE_GUARD: f64 = 1e12;

#[derive(Debug, Error)]
pub enum BiLevelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Numeric(#[from] FredholmError),
    /// A loss left the trust region (> 1e12) or went non-finite; the trace up
    /// to the failing iteration is kept so the run stays diagnosable.
    #[error("diverged at iteration {iterations}: {detail}")]
    Divergence {
        iterations: usize,
        detail: String,
        trace: Vec<TraceRow>,
    },
}

/// Per-observation context handed to an estimating function. Exposes the
/// observation row, the current beta, and the frozen solution b both as
/// precomputed values on the inner grid (for integrals, same nodes as the
/// inner loss) and as a pointwise evaluator.
pub struct PsiCtx<'a> {
    pub obs: &'a [f64],
    pub beta: &'a [f64],
    /// Inner nodes s_j, flat `j2 x node_dim`; empty when the equation
    /// declared `needs_inner: false`.
    pub nodes: &'a [f64],
    pub node_dim: usize,
    /// Monte Carlo weight vol(s) / j2 for integrals over the inner nodes.
    pub node_weight: f64,
    /// b at the inner nodes with this observation's covariates, `j2 x q_b`.
    pub b_nodes: &'a [f64],
    pub q_b: usize,
    sol: &'a dyn SolutionFn,
    cov: &'a [f64],
}

impl PsiCtx<'_> {
    /// Evaluate b at a single node, appending this observation's covariates.
    pub fn b_at(&self, node: &[f64], out: &mut [f64]) {
        let mut pt = Vec::with_capacity(node.len() + self.cov.len());
        pt.extend_from_slice(node);
        pt.extend_from_slice(self.cov);
        self.sol.eval_one(&pt, out);
    }
}

pub type PsiFn = Arc<dyn Fn(&PsiCtx, &mut [f64]) + Send + Sync>;

/// A system of q estimating functions psi(O, beta, b) whose empirical mean
/// the outer loop drives to zero.
#[derive(Clone)]
pub struct EstimatingEquation {
    pub q: usize,
    /// Whether psi integrates b over the inner grid. When false the per-node
    /// b cache is skipped; `PsiCtx::b_at` works either way.
    pub needs_inner: bool,
    pub eval: PsiFn,
}

#[derive(Clone, Debug)]
pub struct BiLevelConfig {
    /// Inner steps per outer step; must be >= 1.
    pub gamma: usize,
    pub max_iter: usize,
    /// Stopping tolerance on the beta step norm.
    pub tol_beta: f64,
    /// Stopping tolerance on the solution-weight step norm. Defaults to the
    /// same value as `tol_beta`; kept separate because the weight vector is
    /// much higher-dimensional and may need a looser bar.
    pub tol_omega: f64,
    pub j1: usize,
    pub j2: usize,
    pub lr_beta: f64,
    pub lr_omega: f64,
    /// Central-difference step for the outer gradient.
    pub fd_step: f64,
    /// Mini-batch of (observation, node) pairs per inner step; 0 = full batch.
    pub batch: usize,
    pub seed: u64,
    pub beta_init: Vec<f64>,
}

impl Default for BiLevelConfig {
    fn default() -> Self {
        Self {
            gamma: 10,
            max_iter: 2000,
            tol_beta: 1e-5,
            tol_omega: 1e-5,
            j1: 1000,
            j2: 1000,
            lr_beta: 1e-2,
            lr_omega: 1e-4,
            fd_step: 1e-5,
            batch: 0,
            seed: 0,
            beta_init: Vec::new(),
        }
    }
}

impl BiLevelConfig {
    pub fn validate(&self, q: usize) -> Result<(), BiLevelError> {
        if self.gamma == 0 {
            return Err(BiLevelError::Config("gamma must be at least 1".into()));
        }
        if self.max_iter == 0 {
            return Err(BiLevelError::Config("max_iter must be at least 1".into()));
        }
        for (name, v) in [
            ("tol_beta", self.tol_beta),
            ("tol_omega", self.tol_omega),
            ("lr_beta", self.lr_beta),
            ("lr_omega", self.lr_omega),
            ("fd_step", self.fd_step),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(BiLevelError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.j1 == 0 || self.j2 == 0 {
            return Err(BiLevelError::Config("j1 and j2 must be at least 1".into()));
        }
        if self.beta_init.len() != q {
            return Err(BiLevelError::Config(format!(
                "beta_init has length {}, estimating equation has q = {q}",
                self.beta_init.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    /// beta entering this iteration (row 1 carries beta_init).
    pub beta: Vec<f64>,
    pub loss_psi: f64,
    pub loss_k: f64,
}

#[derive(Clone, Debug)]
pub struct EstimateReport {
    pub beta_hat: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub final_loss_psi: f64,
    pub final_loss_k: f64,
    /// Last-iteration stopping norms; both < tol iff converged.
    pub step_norm_beta: f64,
    pub step_norm_omega: f64,
    pub trace: Vec<TraceRow>,
    pub wall: Duration,
}

/// Equality covers everything the computation determines; wall time is
/// measured, not computed, so it is excluded.
impl PartialEq for EstimateReport {
    fn eq(&self, other: &Self) -> bool {
        self.beta_hat == other.beta_hat
            && self.converged == other.converged
            && self.iterations == other.iterations
            && self.final_loss_psi.to_bits() == other.final_loss_psi.to_bits()
            && self.final_loss_k.to_bits() == other.final_loss_k.to_bits()
            && self.step_norm_beta.to_bits() == other.step_norm_beta.to_bits()
            && self.step_norm_omega.to_bits() == other.step_norm_omega.to_bits()
            && self.trace == other.trace
    }
}

impl EstimateReport {
    /// Trace as CSV: `iter,beta_1..beta_q,loss_psi,loss_K`.
    pub fn trace_csv(&self) -> String {
        let q = self.beta_hat.len();
        let mut s = String::from("iter");
        for k in 1..=q {
            let _ = write!(s, ",beta_{k}");
        }
        s.push_str(",loss_psi,loss_K\n");
        for row in &self.trace {
            let _ = write!(s, "{}", row.iter);
            for b in &row.beta {
                let _ = write!(s, ",{b}");
            }
            let _ = writeln!(s, ",{},{}", row.loss_psi, row.loss_k);
        }
        s
    }
}

/// Precomputed per-observation inputs for psi evaluations with b frozen:
/// covariate vectors and b at the inner nodes. Valid for any beta, so one
/// workspace serves the loss value and all finite-difference probes.
struct PsiWorkspace {
    covs: Vec<Vec<f64>>,
    b_nodes: Vec<f64>,
    /// When the problem has no covariates every observation shares one
    /// b-node block.
    shared: bool,
    block: usize,
}

fn build_workspace(
    psi: &EstimatingEquation,
    p: &FredholmProblem,
    sol: &dyn SolutionFn,
    data: &Dataset,
    grid: &QuadratureGrid,
) -> Result<PsiWorkspace, FredholmError> {
    let n = data.n();
    let covs: Vec<Vec<f64>> = match &p.covariates {
        Some(f) => (0..n)
            .map(|i| {
                let mut c = Vec::new();
                f(data.row(i), &mut c);
                c
            })
            .collect(),
        None => Vec::new(),
    };
    let shared = covs.is_empty();
    let node_dim = grid.inner_dim();
    let mut b_nodes = Vec::new();
    if psi.needs_inner {
        let blocks = if shared { 1 } else { n };
        let mut pts = Vec::with_capacity(blocks * grid.j2() * sol.input_dim());
        for block in 0..blocks {
            for j in 0..grid.j2() {
                pts.extend_from_slice(grid.inner_point(j));
                if !shared {
                    pts.extend_from_slice(&covs[block]);
                }
            }
        }
        if pts.len() != blocks * grid.j2() * sol.input_dim() {
            return Err(FredholmError::Problem(format!(
                "solution expects input dim {}, grid nodes ({node_dim}) plus covariates do not match",
                sol.input_dim()
            )));
        }
        sol.eval_rows(&pts, &mut b_nodes);
        if let Some(bad) = b_nodes.iter().position(|v| !v.is_finite()) {
            let i = if shared { 0 } else { bad / (grid.j2() * p.q) };
            return Err(FredholmError::NonFinite {
                what: "solution value at inner node",
                index: i,
                detail: format!("value {} in psi workspace", b_nodes[bad]),
            });
        }
    }
    Ok(PsiWorkspace {
        covs,
        b_nodes,
        shared,
        block: grid.j2() * p.q,
    })
}

fn mean_psi_ws(
    psi: &EstimatingEquation,
    beta: &[f64],
    sol: &dyn SolutionFn,
    p: &FredholmProblem,
    data: &Dataset,
    grid: &QuadratureGrid,
    ws: &PsiWorkspace,
) -> Result<Vec<f64>, FredholmError> {
    let n = data.n();
    let mut acc = vec![0.0; psi.q];
    let mut val = vec![0.0; psi.q];
    for i in 0..n {
        let cov: &[f64] = if ws.covs.is_empty() { &[] } else { &ws.covs[i] };
        let b_block: &[f64] = if ws.b_nodes.is_empty() {
            &[]
        } else if ws.shared {
            &ws.b_nodes
        } else {
            &ws.b_nodes[i * ws.block..(i + 1) * ws.block]
        };
        let ctx = PsiCtx {
            obs: data.row(i),
            beta,
            nodes: if psi.needs_inner { grid.inner_points() } else { &[] },
            node_dim: grid.inner_dim(),
            node_weight: grid.inner_weight(),
            b_nodes: b_block,
            q_b: p.q,
            sol,
            cov,
        };
        val.fill(0.0);
        (psi.eval)(&ctx, &mut val);
        for (a, v) in acc.iter_mut().zip(&val) {
            if !v.is_finite() {
                return Err(FredholmError::NonFinite {
                    what: "psi",
                    index: i,
                    detail: format!("value {v} at beta {beta:?}"),
                });
            }
            *a += *v;
        }
    }
    for a in &mut acc {
        *a /= n as f64;
    }
    Ok(acc)
}

fn sqnorm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Mean of psi over the dataset at (beta, b).
pub fn mean_psi(
    psi: &EstimatingEquation,
    beta: &[f64],
    sol: &dyn SolutionFn,
    p: &FredholmProblem,
    data: &Dataset,
    grid: &QuadratureGrid,
) -> Result<Vec<f64>, FredholmError> {
    let ws = build_workspace(psi, p, sol, data, grid)?;
    mean_psi_ws(psi, beta, sol, p, data, grid, &ws)
}

/// Outer loss: squared Euclidean norm of the psi mean.
pub fn loss_psi(
    psi: &EstimatingEquation,
    beta: &[f64],
    sol: &dyn SolutionFn,
    p: &FredholmProblem,
    data: &Dataset,
    grid: &QuadratureGrid,
) -> Result<f64, FredholmError> {
    Ok(sqnorm(&mean_psi(psi, beta, sol, p, data, grid)?))
}

fn grad_beta_ws(
    psi: &EstimatingEquation,
    beta: &[f64],
    sol: &dyn SolutionFn,
    p: &FredholmProblem,
    data: &Dataset,
    grid: &QuadratureGrid,
    fd_step: f64,
    ws: &PsiWorkspace,
) -> Result<Vec<f64>, FredholmError> {
    let mut grad = vec![0.0; beta.len()];
    let mut probe = beta.to_vec();
    for k in 0..beta.len() {
        probe[k] = beta[k] + fd_step;
        let up = sqnorm(&mean_psi_ws(psi, &probe, sol, p, data, grid, ws)?);
        probe[k] = beta[k] - fd_step;
        let down = sqnorm(&mean_psi_ws(psi, &probe, sol, p, data, grid, ws)?);
        probe[k] = beta[k];
        grad[k] = (up - down) / (2.0 * fd_step);
    }
    Ok(grad)
}

/// Central-difference gradient of loss_psi in beta, with b frozen.
pub fn grad_beta(
    psi: &EstimatingEquation,
    beta: &[f64],
    sol: &dyn SolutionFn,
    p: &FredholmProblem,
    data: &Dataset,
    grid: &QuadratureGrid,
    fd_step: f64,
) -> Result<Vec<f64>, FredholmError> {
    if !(fd_step > 0.0) {
        return Err(FredholmError::Config(format!(
            "fd_step must be positive, got {fd_step}"
        )));
    }
    let ws = build_workspace(psi, p, sol, data, grid)?;
    grad_beta_ws(psi, beta, sol, p, data, grid, fd_step, &ws)
}

/// FNV-1a over the bit patterns, used to assert the freezing contract.
fn bits_hash(xs: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for x in xs {
        for byte in x.to_bits().to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// The inner-solver half of the alternation. `update` advances the solution
/// for the current beta and returns the full inner loss afterwards; `omega`
/// is the flat weight vector the stopping rule and freezing contract hash.
pub trait BUpdater {
    fn solution(&self) -> &dyn SolutionFn;
    fn omega(&self) -> Vec<f64>;
    fn update(
        &mut self,
        p: &FredholmProblem,
        data: &Dataset,
        beta: &[f64],
        grid: &QuadratureGrid,
        gamma: usize,
        lr: f64,
        batch: usize,
        rng: &mut Rng,
    ) -> Result<f64, FredholmError>;
}

pub struct NeuralUpdater {
    pub sol: NeuralSolution,
    adam: Adam,
}

impl NeuralUpdater {
    pub fn new(arch: Arch, lr: f64, seed: u64) -> Result<Self, BiLevelError> {
        let mut rng = Rng::from_seed(seed);
        let net = Mlp::new(arch, &mut rng).map_err(|e| BiLevelError::Config(e.to_string()))?;
        let adam = Adam::new(net.n_params(), lr);
        Ok(Self {
            sol: NeuralSolution { net },
            adam,
        })
    }
}

impl BUpdater for NeuralUpdater {
    fn solution(&self) -> &dyn SolutionFn {
        &self.sol
    }

    fn omega(&self) -> Vec<f64> {
        self.sol.net.params().to_vec()
    }

    fn update(
        &mut self,
        p: &FredholmProblem,
        data: &Dataset,
        beta: &[f64],
        grid: &QuadratureGrid,
        gamma: usize,
        lr: f64,
        batch: usize,
        rng: &mut Rng,
    ) -> Result<f64, FredholmError> {
        solve_neural_steps(
            p,
            data,
            beta,
            grid,
            &mut self.sol.net,
            &mut self.adam,
            gamma,
            lr,
            batch,
            rng,
        )
    }
}

/// Polynomial baseline: the inner problem is linear in the coefficients, so
/// each "update" re-solves it exactly; gamma, lr, and batch are irrelevant.
pub struct PolyUpdater {
    pub degree: usize,
    pub sol: PolynomialCoefficients,
}

impl PolyUpdater {
    pub fn new(degree: usize, q: usize, input_dim: usize) -> Result<Self, BiLevelError> {
        let sol = PolynomialCoefficients::zeros(degree, q, input_dim)?;
        Ok(Self { degree, sol })
    }
}

impl BUpdater for PolyUpdater {
    fn solution(&self) -> &dyn SolutionFn {
        &self.sol
    }

    fn omega(&self) -> Vec<f64> {
        self.sol.coeffs.clone()
    }

    fn update(
        &mut self,
        p: &FredholmProblem,
        data: &Dataset,
        beta: &[f64],
        grid: &QuadratureGrid,
        _gamma: usize,
        _lr: f64,
        _batch: usize,
        _rng: &mut Rng,
    ) -> Result<f64, FredholmError> {
        self.sol = solve_polynomial(p, data, beta, grid, self.degree)?;
        loss_k(p, &self.sol, data, beta, grid)
    }
}

/// Alternating loop with a neural inner solver.
pub fn dna_se(
    p: &FredholmProblem,
    psi: &EstimatingEquation,
    data: &Dataset,
    arch: Arch,
    cfg: &BiLevelConfig,
) -> Result<EstimateReport, BiLevelError> {
    check_arch(p, data, &arch)?;
    let mut up = NeuralUpdater::new(arch, cfg.lr_omega, derive_seed(cfg.seed, seeds::NET))?;
    dna_se_with(p, psi, data, &mut up, cfg)
}

/// Alternating loop with the exact polynomial inner solver.
pub fn dna_se_poly(
    p: &FredholmProblem,
    psi: &EstimatingEquation,
    data: &Dataset,
    degree: usize,
    cfg: &BiLevelConfig,
) -> Result<EstimateReport, BiLevelError> {
    if data.n() == 0 {
        return Err(BiLevelError::Config("empty dataset".into()));
    }
    let input_dim = p.b_input_dim(data.row(0));
    let mut up = PolyUpdater::new(degree, p.q, input_dim)?;
    dna_se_with(p, psi, data, &mut up, cfg)
}

fn check_arch(p: &FredholmProblem, data: &Dataset, arch: &Arch) -> Result<(), BiLevelError> {
    if data.n() == 0 {
        return Err(BiLevelError::Config("empty dataset".into()));
    }
    let want_in = p.b_input_dim(data.row(0));
    if arch.input != want_in || arch.output != p.q {
        return Err(BiLevelError::Config(format!(
            "network is {}->{}, problem needs {}->{}",
            arch.input, arch.output, want_in, p.q
        )));
    }
    Ok(())
}

/// Core alternation over any inner updater. Per iteration: record the trace
/// row, take one Adam step on loss_psi in beta (b frozen), then gamma inner
/// steps (beta frozen); stop when both step norms are below tolerance.
pub fn dna_se_with(
    p: &FredholmProblem,
    psi: &EstimatingEquation,
    data: &Dataset,
    updater: &mut dyn BUpdater,
    cfg: &BiLevelConfig,
) -> Result<EstimateReport, BiLevelError> {
    cfg.validate(psi.q)?;
    p.validate()?;
    let start = Instant::now();
    let grid = sample_grid(
        &p.t_domain,
        &p.s_domain,
        cfg.j1,
        cfg.j2,
        derive_seed(cfg.seed, seeds::GRID),
    )
    .map_err(FredholmError::from)?;
    let mut batch_rng = Rng::from_seed(derive_seed(cfg.seed, seeds::BATCH));

    let mut beta = cfg.beta_init.clone();
    let mut adam_beta = Adam::new(beta.len(), cfg.lr_beta);
    let mut trace: Vec<TraceRow> = Vec::new();
    let mut loss_k_cur = loss_k(p, updater.solution(), data, &beta, &grid)?;
    let mut prev_omega = updater.omega();
    let mut converged = false;
    let mut last_db = f64::INFINITY;
    let mut last_dw = f64::INFINITY;

    for m in 1..=cfg.max_iter {
        let (lp, grad) = {
            let sol = updater.solution();
            let ws = build_workspace(psi, p, sol, data, &grid)?;
            let lp = sqnorm(&mean_psi_ws(psi, &beta, sol, p, data, &grid, &ws)?);
            let grad = grad_beta_ws(psi, &beta, sol, p, data, &grid, cfg.fd_step, &ws)?;
            (lp, grad)
        };
        trace.push(TraceRow {
            iter: m,
            beta: beta.clone(),
            loss_psi: lp,
            loss_k: loss_k_cur,
        });
        if !lp.is_finite() || !loss_k_cur.is_finite() || lp > DIVERGENCE_GUARD || loss_k_cur > DIVERGENCE_GUARD
        {
            return Err(BiLevelError::Divergence {
                iterations: m,
                detail: format!("loss_psi {lp}, loss_K {loss_k_cur}"),
                trace,
            });
        }

        let omega_hash = bits_hash(&updater.omega());
        let db = adam_beta.step(&mut beta, &grad);
        assert_eq!(
            bits_hash(&updater.omega()),
            omega_hash,
            "solution weights changed during the beta step"
        );

        let beta_hash = bits_hash(&beta);
        let lk = match updater.update(
            p,
            data,
            &beta,
            &grid,
            cfg.gamma,
            cfg.lr_omega,
            cfg.batch,
            &mut batch_rng,
        ) {
            Ok(l) => l,
            Err(e @ FredholmError::NonFinite { .. }) => {
                return Err(BiLevelError::Divergence {
                    iterations: m,
                    detail: e.to_string(),
                    trace,
                })
            }
            Err(e) => return Err(BiLevelError::Numeric(e)),
        };
        assert_eq!(
            bits_hash(&beta),
            beta_hash,
            "beta changed during the inner steps"
        );

        let omega_now = updater.omega();
        let dw = l2_dist(&omega_now, &prev_omega);
        prev_omega = omega_now;
        loss_k_cur = lk;
        last_db = db;
        last_dw = dw;
        if db < cfg.tol_beta && dw < cfg.tol_omega {
            converged = true;
            break;
        }
    }

    let final_loss_psi = loss_psi(psi, &beta, updater.solution(), p, data, &grid)?;
    Ok(EstimateReport {
        beta_hat: beta,
        converged,
        iterations: trace.len(),
        final_loss_psi,
        final_loss_k: loss_k_cur,
        step_norm_beta: last_db,
        step_norm_omega: last_dw,
        trace,
        wall: start.elapsed(),
    })
}

/// Shortcut for problems whose inner equation does not involve beta: train
/// the solution to convergence first, then drive beta alone. Produces the
/// same trace/report shape as the alternating path.
pub fn dna_se_decoupled(
    p: &FredholmProblem,
    psi: &EstimatingEquation,
    data: &Dataset,
    arch: Arch,
    cfg: &BiLevelConfig,
) -> Result<EstimateReport, BiLevelError> {
    cfg.validate(psi.q)?;
    p.validate()?;
    if p.beta_dependent {
        return Err(BiLevelError::Config(
            "decoupled path requires a beta-independent inner problem".into(),
        ));
    }
    check_arch(p, data, &arch)?;
    let start = Instant::now();
    let grid = sample_grid(
        &p.t_domain,
        &p.s_domain,
        cfg.j1,
        cfg.j2,
        derive_seed(cfg.seed, seeds::GRID),
    )
    .map_err(FredholmError::from)?;
    let mut up = NeuralUpdater::new(arch, cfg.lr_omega, derive_seed(cfg.seed, seeds::NET))?;
    let mut batch_rng = Rng::from_seed(derive_seed(cfg.seed, seeds::BATCH));

    let mut beta = cfg.beta_init.clone();
    let mut trace: Vec<TraceRow> = Vec::new();
    let mut loss_k_cur = loss_k(p, up.solution(), data, &beta, &grid)?;
    let mut prev_omega = up.omega();
    let mut converged_omega = false;
    let mut last_dw = f64::INFINITY;

    // phase 1: inner problem only (it does not depend on beta)
    for m in 1..=cfg.max_iter {
        let lp = loss_psi(psi, &beta, up.solution(), p, data, &grid)?;
        trace.push(TraceRow {
            iter: m,
            beta: beta.clone(),
            loss_psi: lp,
            loss_k: loss_k_cur,
        });
        if !loss_k_cur.is_finite() || loss_k_cur > DIVERGENCE_GUARD {
            return Err(BiLevelError::Divergence {
                iterations: m,
                detail: format!("loss_K {loss_k_cur}"),
                trace,
            });
        }
        let lk = match up.update(
            p,
            data,
            &beta,
            &grid,
            cfg.gamma,
            cfg.lr_omega,
            cfg.batch,
            &mut batch_rng,
        ) {
            Ok(l) => l,
            Err(e @ FredholmError::NonFinite { .. }) => {
                return Err(BiLevelError::Divergence {
                    iterations: m,
                    detail: e.to_string(),
                    trace,
                })
            }
            Err(e) => return Err(BiLevelError::Numeric(e)),
        };
        let omega_now = up.omega();
        last_dw = l2_dist(&omega_now, &prev_omega);
        prev_omega = omega_now;
        loss_k_cur = lk;
        if last_dw < cfg.tol_omega {
            converged_omega = true;
            break;
        }
    }

    // phase 2: beta only, solution frozen
    let mut adam_beta = Adam::new(beta.len(), cfg.lr_beta);
    let mut converged_beta = false;
    let mut last_db = f64::INFINITY;
    let sol = up.solution();
    let ws = build_workspace(psi, p, sol, data, &grid)?;
    for _ in 0..cfg.max_iter {
        let m = trace.len() + 1;
        let lp = sqnorm(&mean_psi_ws(psi, &beta, sol, p, data, &grid, &ws)?);
        trace.push(TraceRow {
            iter: m,
            beta: beta.clone(),
            loss_psi: lp,
            loss_k: loss_k_cur,
        });
        if !lp.is_finite() || lp > DIVERGENCE_GUARD {
            return Err(BiLevelError::Divergence {
                iterations: m,
                detail: format!("loss_psi {lp}"),
                trace,
            });
        }
        let grad = grad_beta_ws(psi, &beta, sol, p, data, &grid, cfg.fd_step, &ws)?;
        last_db = adam_beta.step(&mut beta, &grad);
        if last_db < cfg.tol_beta {
            converged_beta = true;
            break;
        }
    }

    let final_loss_psi = sqnorm(&mean_psi_ws(psi, &beta, sol, p, data, &grid, &ws)?);
    Ok(EstimateReport {
        beta_hat: beta,
        converged: converged_omega && converged_beta,
        iterations: trace.len(),
        final_loss_psi,
        final_loss_k: loss_k_cur,
        step_norm_beta: last_db,
        step_norm_omega: last_dw,
        trace,
        wall: start.elapsed(),
    })
}
