//! Replication driver: per-rep seeding, solver dispatch, the parallel
//! sweep, single-run reports, and the analytic solve path.
//!
//! Failure policy: configuration mistakes abort immediately; numeric
//! failures inside a sweep become NA rows with `converged = false` so one
//! bad replication never costs the others; the same failures in single-run
//! mode (estimate, trace, solve) are fatal with exit code 3.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::Serialize;

use crate::config::{build_bundle, ResolvedAnalytic, ResolvedRun, SolverKind};
use crate::rows::SimulationRow;
use crate::CliError;

use bilevel::{dna_se, dna_se_poly, BiLevelError, EstimateReport};
use examples::{analytic_problems, dummy_dataset, Comparator, ExampleBundle, GeneratedData};
use fredholm::{loss_k, solve_polynomial, Dataset, NeuralSolution, SolutionFn};
use nn_core::{Adam, Arch, Mlp};
use quadrature::{Domain, QuadratureGrid, Rng};

/// Worker count: FREDSE_THREADS overrides the logical core count.
pub fn thread_count() -> Result<usize, CliError> {
    match std::env::var("FREDSE_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Config(format!(
                "FREDSE_THREADS: expected a positive integer, got {v:?}"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn solve_main(
    bundle: &ExampleBundle,
    run: &ResolvedRun,
    data: &Dataset,
    seed: u64,
) -> Result<EstimateReport, BiLevelError> {
    let mut cfg = run.bilevel.clone();
    cfg.seed = seed;
    match run.solver {
        SolverKind::Neural { width, depth } => {
            let arch = Arch::new(bundle.arch.input, width, depth, bundle.arch.output)
                .map_err(|e| BiLevelError::Config(format!("solver: {e}")))?;
            dna_se(&bundle.problem, &bundle.psi, data, arch, &cfg)
        }
        SolverKind::Poly { degree } => {
            dna_se_poly(&bundle.problem, &bundle.psi, data, degree, &cfg)
        }
    }
}

fn na_row(
    run: &ResolvedRun,
    label: &str,
    rep: u64,
    seed: u64,
    iterations: Option<u64>,
    wall_ms: Option<u64>,
) -> SimulationRow {
    SimulationRow {
        example: run.example.to_string(),
        rep,
        seed,
        solver: label.to_string(),
        beta_hat: vec![None; run.q],
        bias: vec![None; run.q],
        iterations,
        converged: false,
        loss_psi: None,
        loss_k: None,
        wall_ms,
    }
}

/// Collapses a solver result into a row. Config errors propagate (they are
/// caller mistakes, not data luck); anything numeric becomes an NA row.
fn report_to_row(
    run: &ResolvedRun,
    label: &str,
    rep: u64,
    seed: u64,
    result: Result<EstimateReport, BiLevelError>,
) -> Result<SimulationRow, CliError> {
    match result {
        Ok(rp) => {
            let beta_hat: Vec<Option<f64>> = rp.beta_hat.iter().map(|&b| Some(b)).collect();
            let bias: Vec<Option<f64>> = rp
                .beta_hat
                .iter()
                .zip(&run.beta_star)
                .map(|(&b, &s)| Some(b - s))
                .collect();
            Ok(SimulationRow {
                example: run.example.to_string(),
                rep,
                seed,
                solver: label.to_string(),
                beta_hat,
                bias,
                iterations: Some(rp.iterations as u64),
                converged: rp.converged,
                loss_psi: Some(rp.final_loss_psi),
                loss_k: Some(rp.final_loss_k),
                wall_ms: run.timing.then(|| rp.wall.as_millis() as u64),
            })
        }
        Err(BiLevelError::Config(msg)) => Err(CliError::Config(msg)),
        Err(BiLevelError::Divergence { iterations, detail, .. }) => {
            eprintln!("warning: {} rep {rep} ({label}): diverged at iteration {iterations}: {detail}", run.example);
            Ok(na_row(run, label, rep, seed, Some(iterations as u64), None))
        }
        Err(BiLevelError::Numeric(e)) => {
            eprintln!("warning: {} rep {rep} ({label}): {e}", run.example);
            Ok(na_row(run, label, rep, seed, None, None))
        }
    }
}

fn comparator_row(
    bundle: &ExampleBundle,
    run: &ResolvedRun,
    c: &Comparator,
    data: &GeneratedData,
    rep: u64,
    seed: u64,
) -> Result<SimulationRow, CliError> {
    let label = c.label();
    match c {
        Comparator::Polynomial(degree) => {
            let mut cfg = run.bilevel.clone();
            cfg.seed = seed;
            let result =
                dna_se_poly(&bundle.problem, &bundle.psi, &data.estimator, *degree, &cfg);
            report_to_row(run, &label, rep, seed, result)
        }
        Comparator::Oracle | Comparator::Biased => {
            let (est, view) = match c {
                Comparator::Oracle => (bundle.oracle.as_ref(), &data.full),
                _ => (bundle.biased.as_ref(), &data.estimator),
            };
            let est = est.expect("comparator availability checked during resolve");
            let start = Instant::now();
            match est(view) {
                Ok(beta) => {
                    let wall = run.timing.then(|| start.elapsed().as_millis() as u64);
                    let bias: Vec<Option<f64>> = beta
                        .iter()
                        .zip(&run.beta_star)
                        .map(|(&b, &s)| Some(b - s))
                        .collect();
                    Ok(SimulationRow {
                        example: run.example.to_string(),
                        rep,
                        seed,
                        solver: label,
                        beta_hat: beta.into_iter().map(Some).collect(),
                        bias,
                        iterations: Some(0),
                        converged: true,
                        loss_psi: None,
                        loss_k: None,
                        wall_ms: wall,
                    })
                }
                Err(e) => {
                    eprintln!("warning: {} rep {rep} ({label}): {e}", run.example);
                    Ok(na_row(run, &label, rep, seed, Some(0), None))
                }
            }
        }
    }
}

fn run_one_rep(
    bundle: &ExampleBundle,
    run: &ResolvedRun,
    rep: u64,
) -> Result<Vec<SimulationRow>, CliError> {
    let seed = run.base_seed.wrapping_add(rep);
    let data = (bundle.generate)(run.n, seed);
    let mut rows = Vec::with_capacity(1 + run.comparators.len());
    let main = solve_main(bundle, run, &data.estimator, seed);
    rows.push(report_to_row(run, &run.solver.label(), rep, seed, main)?);
    for c in &run.comparators {
        rows.push(comparator_row(bundle, run, c, &data, rep, seed)?);
    }
    Ok(rows)
}

/// Full sweep: reps * (1 + comparators) rows, ordered by (rep, solver as
/// configured). Replications run in parallel but the output is identical
/// to the serial order.
pub fn simulate(run: &ResolvedRun) -> Result<Vec<SimulationRow>, CliError> {
    let threads = thread_count()?.min(run.reps);
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<Vec<SimulationRow>, CliError>>>> =
        (0..run.reps).map(|_| Mutex::new(None)).collect();

    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| {
                let bundle = build_bundle(&run.example, run.lambda)
                    .expect("bundle construction validated during config resolution");
                loop {
                    let rep = next.fetch_add(1, Ordering::Relaxed);
                    if rep >= run.reps {
                        break;
                    }
                    let out = run_one_rep(&bundle, run, rep as u64);
                    *slots[rep].lock().expect("no poisoned slot") = Some(out);
                }
            });
        }
    });

    let mut rows = Vec::with_capacity(run.reps * (1 + run.comparators.len()));
    for slot in slots {
        match slot.into_inner().expect("no poisoned slot") {
            Some(Ok(mut r)) => rows.append(&mut r),
            Some(Err(e)) => return Err(e),
            None => return Err(CliError::Numeric("internal: replication never ran".into())),
        }
    }
    Ok(rows)
}

/// Report emitted by `estimate`: one replication, main solver only.
#[derive(Clone, Debug, Serialize)]
pub struct EstimateJson {
    pub example: String,
    pub n: usize,
    pub seed: u64,
    pub solver: String,
    pub beta_hat: Vec<f64>,
    pub beta_star: Vec<f64>,
    pub bias: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub loss_psi: f64,
    #[serde(rename = "loss_K")]
    pub loss_k: f64,
    pub step_norm_beta: f64,
    pub step_norm_omega: f64,
    pub wall_ms: u128,
}

fn fatal_numeric(e: BiLevelError) -> CliError {
    match e {
        BiLevelError::Config(m) => CliError::Config(m),
        other => CliError::Numeric(other.to_string()),
    }
}

/// Single replication at `base_seed`; numeric failures are fatal here.
pub fn estimate(run: &ResolvedRun) -> Result<EstimateJson, CliError> {
    let bundle = build_bundle(&run.example, run.lambda)?;
    let seed = run.base_seed;
    let data = (bundle.generate)(run.n, seed);
    let rp = solve_main(&bundle, run, &data.estimator, seed).map_err(fatal_numeric)?;
    let bias = rp
        .beta_hat
        .iter()
        .zip(&run.beta_star)
        .map(|(&b, &s)| b - s)
        .collect();
    Ok(EstimateJson {
        example: run.example.to_string(),
        n: run.n,
        seed,
        solver: run.solver.label(),
        beta_hat: rp.beta_hat.clone(),
        beta_star: run.beta_star.clone(),
        bias,
        converged: rp.converged,
        iterations: rp.iterations,
        loss_psi: rp.final_loss_psi,
        loss_k: rp.final_loss_k,
        step_norm_beta: rp.step_norm_beta,
        step_norm_omega: rp.step_norm_omega,
        wall_ms: rp.wall.as_millis(),
    })
}

/// Single replication returning the optimizer trace as CSV text. Requires
/// `reps = 1` so the trace is unambiguous.
pub fn trace(run: &ResolvedRun) -> Result<(String, EstimateReport), CliError> {
    if run.reps != 1 {
        return Err(CliError::Config(format!(
            "reps: trace requires reps = 1, got {}",
            run.reps
        )));
    }
    let bundle = build_bundle(&run.example, run.lambda)?;
    let seed = run.base_seed;
    let data = (bundle.generate)(run.n, seed);
    let rp = solve_main(&bundle, run, &data.estimator, seed).map_err(fatal_numeric)?;
    Ok((rp.trace_csv(), rp))
}

/// Outcome of solving one analytic fixture.
#[derive(Clone, Debug, Serialize)]
pub struct SolveOutcome {
    pub problem: String,
    pub solver: String,
    #[serde(rename = "loss_K")]
    pub loss_k: f64,
    /// Max pointwise error against the closed-form solution over 201
    /// equispaced points.
    pub sup_error: f64,
}

/// Deterministic grid for the fixtures: equispaced outer nodes including
/// both endpoints, and a per-panel two-point Gauss rule inside. Under the
/// engine's equal-weight inner sum the Gauss pairs integrate cubics
/// exactly, so `solve` output carries no Monte Carlo bias.
fn panel_grid(t_dom: &Domain, s_dom: &Domain, j1: usize, j2: usize) -> QuadratureGrid {
    let (tlo, thi) = (t_dom.lo()[0], t_dom.hi()[0]);
    let outer: Vec<f64> = if j1 == 1 {
        vec![0.5 * (tlo + thi)]
    } else {
        (0..j1)
            .map(|k| tlo + (thi - tlo) * k as f64 / (j1 - 1) as f64)
            .collect()
    };
    let (slo, shi) = (s_dom.lo()[0], s_dom.hi()[0]);
    let panels = (j2 / 2).max(1);
    let h = (shi - slo) / panels as f64;
    let d = 0.5 * h / 3.0f64.sqrt();
    let mut inner = Vec::with_capacity(2 * panels);
    for p in 0..panels {
        let mid = slo + (p as f64 + 0.5) * h;
        inner.push(mid - d);
        inner.push(mid + d);
    }
    QuadratureGrid::with_nodes(outer, inner, t_dom.clone(), s_dom.clone())
}

pub fn solve_analytic(a: &ResolvedAnalytic) -> Result<SolveOutcome, CliError> {
    let fixtures = analytic_problems();
    let fx = fixtures
        .iter()
        .find(|f| f.id == a.id)
        .ok_or_else(|| CliError::Config(format!("problem: unknown analytic fixture {:?}", a.id)))?;
    let data = dummy_dataset();
    let grid = panel_grid(&fx.problem.t_domain, &fx.problem.s_domain, a.j1, a.j2);

    let (loss, sol): (f64, Box<dyn SolutionFn>) = match a.solver {
        SolverKind::Poly { degree } => {
            let coeffs = solve_polynomial(&fx.problem, &data, &[], &grid, degree)
                .map_err(|e| CliError::Numeric(e.to_string()))?;
            let loss = loss_k(&fx.problem, &coeffs, &data, &[], &grid)
                .map_err(|e| CliError::Numeric(e.to_string()))?;
            (loss, Box::new(coeffs))
        }
        SolverKind::Neural { width, depth } => {
            let arch = Arch::new(1, width, depth, 1)
                .map_err(|e| CliError::Config(format!("solver: {e}")))?;
            let mut rng = Rng::from_seed(a.seed);
            let mut net =
                Mlp::new(arch, &mut rng).map_err(|e| CliError::Config(format!("solver: {e}")))?;
            let mut adam = Adam::new(net.arch().n_params(), a.lr);
            let loss = fredholm::solve_neural_steps(
                &fx.problem,
                &data,
                &[],
                &grid,
                &mut net,
                &mut adam,
                a.steps,
                a.lr,
                0,
                &mut rng,
            )
            .map_err(|e| CliError::Numeric(e.to_string()))?;
            (loss, Box::new(NeuralSolution { net }))
        }
    };

    let lo = fx.problem.t_domain.lo()[0];
    let hi = fx.problem.t_domain.hi()[0];
    let mut sup = 0.0f64;
    let mut got = [0.0];
    let mut want = [0.0];
    for i in 0..=200 {
        let t = lo + (hi - lo) * i as f64 / 200.0;
        sol.eval_one(&[t], &mut got);
        fx.solution.eval_one(&[t], &mut want);
        sup = sup.max((got[0] - want[0]).abs());
    }
    Ok(SolveOutcome {
        problem: format!("analytic:{}", a.id),
        solver: a.solver.label(),
        loss_k: loss,
        sup_error: sup,
    })
}
