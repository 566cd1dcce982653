//! Neural inner solver: Adam steps on the inner loss with beta frozen.
//!
//! The gradient of the loss with respect to the network parameters flows
//! through b at two kinds of rows: outer nodes (through the -alpha*w*b
//! term) and inner nodes (through the kernel integral). Both are batched
//! into a single forward/backward pass per step.

use crate::engine::{self, BValues, Tableau};
use crate::{Dataset, FredholmError, FredholmProblem};
use nn_core::{Adam, Mlp, Scratch};
use quadrature::{QuadratureGrid, Rng};

/// Precomputed b-argument rows for the whole grid.
struct Args {
    in_dim: usize,
    /// One row block serves every observation (no covariates).
    shared: bool,
    /// False when the kernel is identically zero: inner rows are skipped.
    has_kernel: bool,
    inner: Vec<f64>,
    outer: Vec<f64>,
    inner_rows: usize,
    outer_rows: usize,
    /// inner rows then outer rows, the full-batch evaluation block.
    xs_full: Vec<f64>,
}

fn build_args(
    p: &FredholmProblem,
    data: &Dataset,
    grid: &QuadratureGrid,
    tab: &Tableau,
) -> Args {
    let shared = p.covariates.is_none();
    let has_kernel = !(tab.g.is_empty() && tab.k.is_none());
    let (sd, td) = (grid.inner_dim(), grid.outer_dim());
    let in_dim = p.b_input_dim(data.row(0));
    let mut inner = Vec::new();
    let mut outer = Vec::new();
    if shared {
        if has_kernel {
            engine::b_arg_rows(grid.inner_points(), sd, None, &mut inner);
        }
        engine::b_arg_rows(grid.outer_points(), td, None, &mut outer);
    } else {
        let cov_fn = p.covariates.as_ref().unwrap();
        let mut cov = Vec::new();
        for i in 0..data.n() {
            cov.clear();
            cov_fn(data.row(i), &mut cov);
            if has_kernel {
                engine::b_arg_rows(grid.inner_points(), sd, Some(&cov), &mut inner);
            }
            engine::b_arg_rows(grid.outer_points(), td, Some(&cov), &mut outer);
        }
    }
    let inner_rows = inner.len() / in_dim;
    let outer_rows = outer.len() / in_dim;
    let mut xs_full = Vec::with_capacity(inner.len() + outer.len());
    xs_full.extend_from_slice(&inner);
    xs_full.extend_from_slice(&outer);
    Args { in_dim, shared, has_kernel, inner, outer, inner_rows, outer_rows, xs_full }
}

fn bvalues_from_out(args: &Args, out: &[f64], tab: &Tableau) -> BValues {
    let split = args.inner_rows * tab.q;
    BValues {
        shared: args.shared,
        inner: out[..split].to_vec(),
        outer: out[split..].to_vec(),
        j1: tab.j1,
        j2: tab.j2,
        q: tab.q,
    }
}

/// dL/dR scaled rows -> upstream gradient on the stacked (inner, outer)
/// evaluation rows. `dl` has the residual-row layout (shared J1 x q or
/// per-obs n x J1 x q); zero entries cost nothing downstream.
fn fill_upstream(tab: &Tableau, args: &Args, dl: &[f64], upstream: &mut [f64]) {
    let (n, j1, j2, q) = (tab.n, tab.j1, tab.j2, tab.q);
    let ir = args.inner_rows;
    upstream.iter_mut().for_each(|u| *u = 0.0);

    if tab.averaged {
        // outer rows: dl[l,c] * (-alpha * wbar_l)
        for l in 0..j1 {
            let wl = tab.w.as_ref().map_or(1.0, |w| w[l]);
            let f = -tab.alpha * wl;
            for c in 0..q {
                upstream[(ir + l) * q + c] = dl[l * q + c] * f;
            }
        }
        if args.has_kernel {
            let wqn = tab.wq / n as f64;
            let mut vm = vec![0.0; q];
            for (m, hm) in tab.h.iter().enumerate() {
                let gm = &tab.g[m];
                for i in 0..n {
                    let hrow = &hm[i * j1..(i + 1) * j1];
                    vm.iter_mut().for_each(|v| *v = 0.0);
                    for l in 0..j1 {
                        let hv = hrow[l];
                        if hv == 0.0 {
                            continue;
                        }
                        for c in 0..q {
                            vm[c] += dl[l * q + c] * hv;
                        }
                    }
                    if vm.iter().all(|v| *v == 0.0) {
                        continue;
                    }
                    let grow = &gm[i * j2..(i + 1) * j2];
                    for j in 0..j2 {
                        let gv = grow[j] * wqn;
                        for c in 0..q {
                            upstream[j * q + c] += gv * vm[c];
                        }
                    }
                }
            }
        }
        return;
    }

    let mut vm = vec![0.0; q];
    for i in 0..n {
        let dlrow = &dl[i * j1 * q..(i + 1) * j1 * q];
        let in_base = if args.shared { 0 } else { i * j2 };
        let out_base = ir + if args.shared { 0 } else { i * j1 };
        for l in 0..j1 {
            let wl = tab.w.as_ref().map_or(1.0, |w| w[i * j1 + l]);
            let f = -tab.alpha * wl;
            for c in 0..q {
                upstream[(out_base + l) * q + c] += dlrow[l * q + c] * f;
            }
        }
        if !args.has_kernel {
            continue;
        }
        match &tab.k {
            Some(kv) => {
                for l in 0..j1 {
                    let krow = &kv[(i * j1 + l) * j2..(i * j1 + l + 1) * j2];
                    for c in 0..q {
                        let d = dlrow[l * q + c] * tab.wq;
                        if d == 0.0 {
                            continue;
                        }
                        for j in 0..j2 {
                            upstream[(in_base + j) * q + c] += d * krow[j];
                        }
                    }
                }
            }
            None => {
                for (m, hm) in tab.h.iter().enumerate() {
                    let hrow = &hm[i * j1..(i + 1) * j1];
                    vm.iter_mut().for_each(|v| *v = 0.0);
                    for l in 0..j1 {
                        let hv = hrow[l];
                        if hv == 0.0 {
                            continue;
                        }
                        for c in 0..q {
                            vm[c] += dlrow[l * q + c] * hv;
                        }
                    }
                    if vm.iter().all(|v| *v == 0.0) {
                        continue;
                    }
                    let grow = &tab.g[m][i * j2..(i + 1) * j2];
                    for j in 0..j2 {
                        let gv = grow[j] * tab.wq;
                        for c in 0..q {
                            upstream[(in_base + j) * q + c] += gv * vm[c];
                        }
                    }
                }
            }
        }
    }
}

/// Full-batch loss without gradient bookkeeping.
fn full_loss(
    net: &Mlp,
    args: &Args,
    tab: &Tableau,
    scratch: &mut Scratch,
    out: &mut Vec<f64>,
) -> Result<f64, FredholmError> {
    let rows = args.inner_rows + args.outer_rows;
    net.forward_scratch(&args.xs_full, rows, scratch, out);
    let bv = bvalues_from_out(args, out, tab);
    let rr = engine::residual_from(tab, &bv);
    engine::loss_from_rows(&rr)
}

/// One full-batch gradient step. Returns the loss at the pre-step weights.
fn full_step(
    net: &mut Mlp,
    adam: &mut Adam,
    args: &Args,
    tab: &Tableau,
    grads: &mut [f64],
) -> Result<f64, FredholmError> {
    let rows = args.inner_rows + args.outer_rows;
    let cache = net.forward_cached(&args.xs_full, rows);
    let bv = bvalues_from_out(args, &cache.out, tab);
    let rr = engine::residual_from(tab, &bv);
    let loss = engine::loss_from_rows(&rr)?;
    let g0 = if tab.averaged {
        2.0 / tab.j1 as f64
    } else {
        2.0 / (tab.n as f64 * tab.j1 as f64)
    };
    let dl: Vec<f64> = rr.rows.iter().map(|r| r * g0).collect();
    let mut upstream = vec![0.0; rows * tab.q];
    fill_upstream(tab, args, &dl, &mut upstream);
    grads.iter_mut().for_each(|g| *g = 0.0);
    net.backward(&args.xs_full, &cache, &upstream, grads);
    adam.step(net.params_mut(), grads);
    Ok(loss)
}

/// Minibatch step for problems whose b-rows are shared across
/// observations: forwards the shared rows, restricts the loss estimate and
/// upstream to the sampled (observation, node) pairs.
fn shared_minibatch_step(
    net: &mut Mlp,
    adam: &mut Adam,
    args: &Args,
    tab: &Tableau,
    batch: usize,
    rng: &mut Rng,
    grads: &mut [f64],
) -> Result<f64, FredholmError> {
    let (n, j1, q) = (tab.n, tab.j1, tab.q);
    let rows = args.inner_rows + args.outer_rows;
    let cache = net.forward_cached(&args.xs_full, rows);
    let bv = bvalues_from_out(args, &cache.out, tab);
    let rr = engine::residual_from(tab, &bv);

    let scale = 2.0 / batch as f64;
    let mut dl = vec![0.0; rr.rows.len()];
    let mut loss = 0.0;
    for _ in 0..batch {
        let row = if tab.averaged {
            (rng.uniform() * j1 as f64) as usize % j1
        } else {
            let i = (rng.uniform() * n as f64) as usize % n;
            let l = (rng.uniform() * j1 as f64) as usize % j1;
            i * j1 + l
        };
        let rrow = &rr.rows[row * q..(row + 1) * q];
        for (c, &r) in rrow.iter().enumerate() {
            loss += r * r;
            dl[row * q + c] += scale * r;
        }
    }
    loss /= batch as f64;
    if !loss.is_finite() {
        return Err(FredholmError::NonFinite {
            what: "inner loss",
            index: 0,
            detail: format!("minibatch loss {loss}"),
        });
    }
    let mut upstream = vec![0.0; rows * q];
    fill_upstream(tab, args, &dl, &mut upstream);
    grads.iter_mut().for_each(|g| *g = 0.0);
    net.backward(&args.xs_full, &cache, &upstream, grads);
    adam.step(net.params_mut(), grads);
    Ok(loss)
}

/// Minibatch step for per-observation b-rows: gathers the inner blocks of
/// the distinct sampled observations plus the sampled outer rows, so the
/// forward/backward cost scales with the batch, not the dataset.
fn perobs_minibatch_step(
    net: &mut Mlp,
    adam: &mut Adam,
    args: &Args,
    tab: &Tableau,
    batch: usize,
    rng: &mut Rng,
    grads: &mut [f64],
) -> Result<f64, FredholmError> {
    let (n, j1, j2, q) = (tab.n, tab.j1, tab.j2, tab.q);
    let d = args.in_dim;

    let mut pairs = Vec::with_capacity(batch);
    for _ in 0..batch {
        let i = (rng.uniform() * n as f64) as usize % n;
        let l = (rng.uniform() * j1 as f64) as usize % j1;
        pairs.push((i, l));
    }
    let mut distinct: Vec<usize> = pairs.iter().map(|&(i, _)| i).collect();
    distinct.sort_unstable();
    distinct.dedup();
    let dpos = |i: usize| distinct.binary_search(&i).unwrap();

    let kj2 = if args.has_kernel { j2 } else { 0 };
    let inner_rows = distinct.len() * kj2;
    let rows = inner_rows + batch;
    let mut xs = Vec::with_capacity(rows * d);
    for &i in &distinct {
        if args.has_kernel {
            xs.extend_from_slice(&args.inner[i * j2 * d..(i + 1) * j2 * d]);
        }
    }
    for &(i, l) in &pairs {
        xs.extend_from_slice(&args.outer[(i * j1 + l) * d..(i * j1 + l + 1) * d]);
    }
    let cache = net.forward_cached(&xs, rows);
    let out = &cache.out;

    // inner kernel integrals per distinct observation and separable term
    let nterms = tab.g.len();
    let mut ints = vec![0.0; distinct.len() * nterms * q];
    if args.has_kernel && tab.k.is_none() {
        for (dp, &i) in distinct.iter().enumerate() {
            let bin = &out[dp * j2 * q..(dp + 1) * j2 * q];
            for (m, gm) in tab.g.iter().enumerate() {
                let grow = &gm[i * j2..(i + 1) * j2];
                let dst = &mut ints[(dp * nterms + m) * q..(dp * nterms + m + 1) * q];
                for j in 0..j2 {
                    let gv = grow[j];
                    for c in 0..q {
                        dst[c] += gv * bin[j * q + c];
                    }
                }
                for v in dst.iter_mut() {
                    *v *= tab.wq;
                }
            }
        }
    }

    // residuals at the sampled pairs and their dL/dR
    let scale = 2.0 / batch as f64;
    let mut loss = 0.0;
    let mut dl = vec![0.0; batch * q];
    for (p_idx, &(i, l)) in pairs.iter().enumerate() {
        let dp = dpos(i);
        let bout = &out[(inner_rows + p_idx) * q..(inner_rows + p_idx + 1) * q];
        let wl = tab.w.as_ref().map_or(1.0, |w| w[i * j1 + l]);
        for c in 0..q {
            let mut r = 0.0;
            if args.has_kernel {
                match &tab.k {
                    Some(kv) => {
                        let krow = &kv[(i * j1 + l) * j2..(i * j1 + l + 1) * j2];
                        let bin = &out[dp * j2 * q..(dp + 1) * j2 * q];
                        for j in 0..j2 {
                            r += krow[j] * bin[j * q + c];
                        }
                        r *= tab.wq;
                    }
                    None => {
                        for m in 0..nterms {
                            r += tab.h[m][i * j1 + l] * ints[(dp * nterms + m) * q + c];
                        }
                    }
                }
            }
            r -= tab.c[(i * j1 + l) * q + c] + tab.alpha * wl * bout[c];
            loss += r * r;
            dl[p_idx * q + c] = scale * r;
        }
    }
    loss /= batch as f64;
    if !loss.is_finite() {
        return Err(FredholmError::NonFinite {
            what: "inner loss",
            index: 0,
            detail: format!("minibatch loss {loss}"),
        });
    }

    // upstream: outer pair rows directly, inner rows through the kernel
    let mut upstream = vec![0.0; rows * q];
    for (p_idx, &(i, l)) in pairs.iter().enumerate() {
        let wl = tab.w.as_ref().map_or(1.0, |w| w[i * j1 + l]);
        let f = -tab.alpha * wl;
        for c in 0..q {
            upstream[(inner_rows + p_idx) * q + c] = dl[p_idx * q + c] * f;
        }
        if !args.has_kernel {
            continue;
        }
        let dp = dpos(i);
        match &tab.k {
            Some(kv) => {
                let krow = &kv[(i * j1 + l) * j2..(i * j1 + l + 1) * j2];
                for c in 0..q {
                    let dv = dl[p_idx * q + c] * tab.wq;
                    if dv == 0.0 {
                        continue;
                    }
                    for j in 0..j2 {
                        upstream[(dp * j2 + j) * q + c] += dv * krow[j];
                    }
                }
            }
            None => {
                for (m, hm) in tab.h.iter().enumerate() {
                    let hv = hm[i * j1 + l];
                    if hv == 0.0 {
                        continue;
                    }
                    let grow = &tab.g[m][i * j2..(i + 1) * j2];
                    for c in 0..q {
                        let dv = dl[p_idx * q + c] * hv * tab.wq;
                        if dv == 0.0 {
                            continue;
                        }
                        for j in 0..j2 {
                            upstream[(dp * j2 + j) * q + c] += dv * grow[j];
                        }
                    }
                }
            }
        }
    }
    grads.iter_mut().for_each(|g| *g = 0.0);
    net.backward(&xs, &cache, &upstream, grads);
    adam.step(net.params_mut(), grads);
    Ok(loss)
}

/// `steps` Adam updates on the inner loss with beta and the grid frozen.
///
/// `batch = 0` runs full-batch updates and consumes no randomness; a
/// positive batch samples that many (observation, outer-node) pairs per
/// step from `rng` (with replacement). Returns the full-batch loss after
/// the final step.
///
/// The explicit `rng` argument keeps minibatch draws reproducible and
/// isolated from every other random stream in a run.
#[allow(clippy::too_many_arguments)]
pub fn solve_neural_steps(
    p: &FredholmProblem,
    data: &Dataset,
    beta: &[f64],
    grid: &QuadratureGrid,
    net: &mut Mlp,
    adam: &mut Adam,
    steps: usize,
    lr: f64,
    batch: usize,
    rng: &mut Rng,
) -> Result<f64, FredholmError> {
    if steps == 0 {
        return Err(FredholmError::Config("steps must be >= 1".into()));
    }
    let tab = engine::build_tableau(p, data, beta, grid)?;
    let args = build_args(p, data, grid, &tab);
    let arch = net.arch();
    if arch.input != args.in_dim || arch.output != p.q {
        return Err(FredholmError::Config(format!(
            "network is {}->{}, problem needs {}->{}",
            arch.input, arch.output, args.in_dim, p.q
        )));
    }
    adam.lr = lr;

    let total_pairs = if tab.averaged { tab.j1 } else { tab.n * tab.j1 };
    let minibatch = batch > 0 && batch < total_pairs;

    let mut grads = vec![0.0; net.n_params()];
    for step in 0..steps {
        let res = if !minibatch {
            full_step(net, adam, &args, &tab, &mut grads)
        } else if args.shared {
            shared_minibatch_step(net, adam, &args, &tab, batch, rng, &mut grads)
        } else {
            perobs_minibatch_step(net, adam, &args, &tab, batch, rng, &mut grads)
        };
        match res {
            Ok(loss) if loss.is_finite() => {}
            Ok(loss) => {
                return Err(FredholmError::NonFinite {
                    what: "inner loss",
                    index: step,
                    detail: format!("loss {loss} at step {step}"),
                })
            }
            Err(FredholmError::NonFinite { what, detail, .. }) => {
                return Err(FredholmError::NonFinite { what, index: step, detail })
            }
            Err(e) => return Err(e),
        }
    }

    let mut scratch = Scratch::default();
    let mut out = Vec::new();
    full_loss(net, &args, &tab, &mut scratch, &mut out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Kernel, ResidualMode, SeparableTerm};
    use nn_core::Arch;
    use quadrature::{sample_grid, Domain};
    use std::sync::Arc;

    fn data(n: usize) -> Dataset {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| vec![0.2 + 0.15 * i as f64, (i % 3) as f64 * 0.3 - 0.3])
            .collect();
        Dataset::from_rows(vec!["u".into(), "v".into()], &rows).unwrap()
    }

    fn kernel() -> Kernel {
        Kernel::Separable(vec![
            SeparableTerm {
                left: Arc::new(|o: &[f64], _b: &[f64], p: &[f64], d: usize, out: &mut [f64]| {
                    for (k, v) in out.iter_mut().enumerate() {
                        *v = p[k * d] + 0.5 * o[0];
                    }
                }),
                right: Arc::new(|_o: &[f64], b: &[f64], p: &[f64], d: usize, out: &mut [f64]| {
                    for (k, v) in out.iter_mut().enumerate() {
                        *v = b[0] * (1.0 - p[k * d]);
                    }
                }),
            },
            SeparableTerm {
                left: Arc::new(|o: &[f64], _b: &[f64], p: &[f64], d: usize, out: &mut [f64]| {
                    for (k, v) in out.iter_mut().enumerate() {
                        *v = o[1] * p[k * d] * p[k * d];
                    }
                }),
                right: Arc::new(|_o: &[f64], _b: &[f64], p: &[f64], d: usize, out: &mut [f64]| {
                    for (k, v) in out.iter_mut().enumerate() {
                        *v = 0.7 + p[k * d];
                    }
                }),
            },
        ])
    }

    fn forcing2() -> crate::ForcingFn {
        Arc::new(|o: &[f64], b: &[f64], p: &[f64], d: usize, out: &mut [f64]| {
            for k in 0..p.len() / d {
                let t = p[k * d];
                out[2 * k] = o[0] - b[0] * t;
                out[2 * k + 1] = 0.4 * t * t + o[1];
            }
        })
    }

    fn problem(averaged: bool, with_cov: bool) -> FredholmProblem {
        let d = Domain::interval(0.0, 1.0).unwrap();
        FredholmProblem {
            q: 2,
            mode: ResidualMode::SecondKind,
            s_domain: d.clone(),
            t_domain: d,
            kernel: kernel(),
            forcing: forcing2(),
            weight: Some(Arc::new(
                |o: &[f64], _b: &[f64], p: &[f64], d: usize, out: &mut [f64]| {
                    for (k, v) in out.iter_mut().enumerate() {
                        *v = 1.0 + 0.2 * o[0] * p[k * d];
                    }
                },
            )),
            covariates: if with_cov {
                Some(Arc::new(|obs: &[f64], out: &mut Vec<f64>| out.push(obs[0])))
            } else {
                None
            },
            averaged,
            beta_dependent: true,
        }
    }

    fn fd_grad(
        net: &Mlp,
        args: &Args,
        tab: &Tableau,
        h: f64,
    ) -> Vec<f64> {
        let mut grads = vec![0.0; net.n_params()];
        let mut scratch = Scratch::default();
        let mut out = Vec::new();
        for k in 0..net.n_params() {
            let mut plus = net.clone();
            plus.params_mut()[k] += h;
            let lp = full_loss(&plus, args, tab, &mut scratch, &mut out).unwrap();
            let mut minus = net.clone();
            minus.params_mut()[k] -= h;
            let lm = full_loss(&minus, args, tab, &mut scratch, &mut out).unwrap();
            grads[k] = (lp - lm) / (2.0 * h);
        }
        grads
    }

    fn exact_grad(net: &Mlp, args: &Args, tab: &Tableau) -> Vec<f64> {
        let rows = args.inner_rows + args.outer_rows;
        let cache = net.forward_cached(&args.xs_full, rows);
        let bv = bvalues_from_out(args, &cache.out, tab);
        let rr = engine::residual_from(tab, &bv);
        let g0 = if tab.averaged {
            2.0 / tab.j1 as f64
        } else {
            2.0 / (tab.n as f64 * tab.j1 as f64)
        };
        let dl: Vec<f64> = rr.rows.iter().map(|r| r * g0).collect();
        let mut upstream = vec![0.0; rows * tab.q];
        fill_upstream(tab, args, &dl, &mut upstream);
        let mut grads = vec![0.0; net.n_params()];
        net.backward(&args.xs_full, &cache, &upstream, &mut grads);
        grads
    }

    fn assert_close(got: &[f64], want: &[f64], tol: f64, label: &str) {
        let num: f64 = got
            .iter()
            .zip(want)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den: f64 = want.iter().map(|w| w * w).sum::<f64>().sqrt().max(1e-12);
        assert!(num / den <= tol, "{label}: relative gradient error {}", num / den);
    }

    #[test]
    fn full_batch_gradient_matches_fd_all_layouts() {
        let dom = Domain::interval(0.0, 1.0).unwrap();
        let grid = sample_grid(&dom, &dom, 6, 9, 77).unwrap();
        let beta = [0.6, -0.2];
        for (avg, cov, label) in
            [(false, false, "shared"), (false, true, "per-obs"), (true, false, "averaged")]
        {
            let p = problem(avg, cov);
            let ds = data(4);
            let tab = engine::build_tableau(&p, &ds, &beta, &grid).unwrap();
            let args = build_args(&p, &ds, &grid, &tab);
            let input = args.in_dim;
            let mut rng = Rng::from_seed(5);
            let net = Mlp::new(Arch::new(input, 4, 2, 2).unwrap(), &mut rng).unwrap();
            let got = exact_grad(&net, &args, &tab);
            let want = fd_grad(&net, &args, &tab, 1e-6);
            assert_close(&got, &want, 1e-6, label);
        }
    }

    #[test]
    fn pointwise_kernel_gradient_matches_fd() {
        let dom = Domain::interval(0.0, 1.0).unwrap();
        let grid = sample_grid(&dom, &dom, 5, 7, 13).unwrap();
        let beta = [0.5, 0.1];
        for cov in [false, true] {
            let mut p = problem(false, cov);
            p.kernel = Kernel::Pointwise(Arc::new(
                |s: &[f64], t: &[f64], o: &[f64], b: &[f64]| {
                    (s[0] + 0.5 * o[0]) * b[0] * (1.0 - t[0])
                        + o[1] * s[0] * s[0] * (0.7 + t[0])
                },
            ));
            let ds = data(3);
            let tab = engine::build_tableau(&p, &ds, &beta, &grid).unwrap();
            let args = build_args(&p, &ds, &grid, &tab);
            let mut rng = Rng::from_seed(6);
            let net = Mlp::new(Arch::new(args.in_dim, 3, 1, 2).unwrap(), &mut rng).unwrap();
            let got = exact_grad(&net, &args, &tab);
            let want = fd_grad(&net, &args, &tab, 1e-6);
            assert_close(&got, &want, 1e-6, "pointwise");
        }
    }

    /// Minibatch steps must compute the exact gradient of their own
    /// sampled objective: replay the same pair draws and check by FD.
    #[test]
    fn minibatch_gradients_match_their_sampled_objective() {
        let dom = Domain::interval(0.0, 1.0).unwrap();
        let grid = sample_grid(&dom, &dom, 6, 8, 21).unwrap();
        let beta = [0.3, 0.2];
        let batch = 5;

        for (cov, label) in [(false, "shared-mb"), (true, "perobs-mb")] {
            let p = problem(false, cov);
            let ds = data(4);
            let tab = engine::build_tableau(&p, &ds, &beta, &grid).unwrap();
            let args = build_args(&p, &ds, &grid, &tab);
            let mut rng = Rng::from_seed(9);
            let mut net =
                Mlp::new(Arch::new(args.in_dim, 3, 2, 2).unwrap(), &mut rng).unwrap();

            // replay the draws to learn which pairs the step will sample
            let mut replay = Rng::from_seed(1234);
            let mut pairs = Vec::new();
            for _ in 0..batch {
                let i = (replay.uniform() * tab.n as f64) as usize % tab.n;
                let l = (replay.uniform() * tab.j1 as f64) as usize % tab.j1;
                pairs.push((i, l));
            }

            // sampled objective via public single-point residuals
            let sampled_loss = |net: &Mlp| -> f64 {
                let sol = crate::NeuralSolution { net: net.clone() };
                let mut acc = 0.0;
                for &(i, l) in &pairs {
                    let r = engine::residual(
                        &p,
                        &sol,
                        grid.outer_point(l),
                        ds.row(i),
                        &beta,
                        &grid,
                    )
                    .unwrap();
                    acc += r.iter().map(|v| v * v).sum::<f64>();
                }
                acc / batch as f64
            };

            let mut grads = vec![0.0; net.n_params()];
            let mut adam = Adam::new(net.n_params(), 0.0); // lr 0: params stay put
            let mut step_rng = Rng::from_seed(1234);
            let loss = if cov {
                perobs_minibatch_step(
                    &mut net, &mut adam, &args, &tab, batch, &mut step_rng, &mut grads,
                )
                .unwrap()
            } else {
                shared_minibatch_step(
                    &mut net, &mut adam, &args, &tab, batch, &mut step_rng, &mut grads,
                )
                .unwrap()
            };
            assert!(
                (loss - sampled_loss(&net)).abs() <= 1e-12 * (1.0 + loss),
                "{label}: reported minibatch loss"
            );

            let h = 1e-6;
            let mut want = vec![0.0; net.n_params()];
            for k in 0..net.n_params() {
                let mut plus = net.clone();
                plus.params_mut()[k] += h;
                let mut minus = net.clone();
                minus.params_mut()[k] -= h;
                want[k] = (sampled_loss(&plus) - sampled_loss(&minus)) / (2.0 * h);
            }
            assert_close(&grads, &want, 1e-5, label);
        }
    }
}
