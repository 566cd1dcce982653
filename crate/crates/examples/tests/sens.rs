//! The confounded binary-outcome bundle against enumeration and
//! finite-difference oracles.

use examples::{expit, sens_bundle, sens_default_bundle, working_score, SENS_BETA_STAR, SENS_P};
use fredholm::{loss_k, Dataset, FnSolution, FredholmError, Kernel};
use quadrature::Rng;

/// Conditional law p(y, a | x, u; beta), coded independently of the
/// library (straight from the two expit displays).
fn joint(y: f64, a: f64, x: &[f64], u: f64, beta: f64) -> f64 {
    let sx: f64 = x
        .iter()
        .enumerate()
        .map(|(j, &xj)| if j % 2 == 0 { xj } else { -xj })
        .sum();
    let pa = expit(3.0 * sx + 2.0 * u);
    let py = expit(4.0 * sx + beta * a + 2.0 * u);
    (if a > 0.5 { pa } else { 1.0 - pa }) * (if y > 0.5 { py } else { 1.0 - py })
}

fn random_x(rng: &mut Rng) -> [f64; SENS_P] {
    let mut x = [0.0; SENS_P];
    for xi in &mut x {
        *xi = rng.uniform();
    }
    x
}

/// Composite Simpson used only by this test file.
fn simpson<F: Fn(f64) -> f64>(lo: f64, hi: f64, panels: usize, f: F) -> f64 {
    let h = (hi - lo) / panels as f64;
    let mut acc = f(lo) + f(hi);
    for k in 1..panels {
        acc += if k % 2 == 1 { 4.0 } else { 2.0 } * f(lo + k as f64 * h);
    }
    acc * h / 3.0
}

#[test]
fn working_score_matches_log_likelihood_differences() {
    let mut rng = Rng::from_seed(61);
    let h = 1e-5;
    for _ in 0..50 {
        let x = random_x(&mut rng);
        let u = rng.uniform_in(-0.5, 0.5);
        let y = rng.bernoulli(0.5);
        let a = rng.bernoulli(0.5);
        let beta = rng.uniform_in(1.0, 3.0);
        let fd = (joint(y, a, &x, u, beta + h).ln() - joint(y, a, &x, u, beta - h).ln())
            / (2.0 * h);
        let got = working_score(y, a, &x, u, beta);
        let denom = fd.abs().max(1e-8);
        assert!(
            (got - fd).abs() / denom <= 1e-6,
            "score {got} vs fd {fd} at a={a} y={y} beta={beta}"
        );
    }
}

#[test]
fn kernel_and_forcing_match_brute_force_enumeration() {
    // re-assemble K and C by looping y and a directly, with the cell
    // normalizers computed by this file's own quadrature
    let bundle = sens_default_bundle();
    let Kernel::Separable(terms) = &bundle.problem.kernel else {
        panic!("expected a separable kernel");
    };
    assert_eq!(terms.len(), 4);

    let mut rng = Rng::from_seed(71);
    for _ in 0..20 {
        let x = random_x(&mut rng);
        let mut obs = x.to_vec();
        obs.push(rng.bernoulli(0.5));
        obs.push(rng.bernoulli(0.5));
        let beta = [rng.uniform_in(1.0, 3.0)];
        let up = rng.uniform_in(-0.5, 0.5);
        let u = rng.uniform_in(-0.5, 0.5);

        let mut k_lib = 0.0;
        for term in terms {
            let mut l = [0.0];
            let mut r = [0.0];
            (term.left)(&obs, &beta, &[up], 1, &mut l);
            (term.right)(&obs, &beta, &[u], 1, &mut r);
            k_lib += l[0] * r[0];
        }
        let mut c_lib = [0.0];
        (bundle.problem.forcing)(&obs, &beta, &[u], 1, &mut c_lib);

        let mut k_brute = 0.0;
        let mut c_brute = 0.0;
        for y in [0.0, 1.0] {
            for a in [0.0, 1.0] {
                let g = simpson(-0.5, 0.5, 1600, |v| joint(y, a, &x, v, beta[0]));
                let sw = simpson(-0.5, 0.5, 1600, |v| {
                    let s = a * (y - expit(4.0 * alt(&x) + beta[0] * a + 2.0 * v));
                    s * joint(y, a, &x, v, beta[0])
                });
                k_brute += joint(y, a, &x, up, beta[0]) * joint(y, a, &x, u, beta[0]) / g;
                c_brute += joint(y, a, &x, u, beta[0]) * sw / g;
            }
        }
        assert!(
            (k_lib - k_brute).abs() <= 1e-8 * k_brute.abs().max(1.0),
            "kernel {k_lib} vs brute force {k_brute}"
        );
        assert!(
            (c_lib[0] - c_brute).abs() <= 1e-8 * c_brute.abs().max(1.0),
            "forcing {} vs brute force {c_brute}",
            c_lib[0]
        );
    }
}

fn alt(x: &[f64]) -> f64 {
    x.iter()
        .enumerate()
        .map(|(j, &xj)| if j % 2 == 0 { xj } else { -xj })
        .sum()
}

#[test]
fn kernel_is_nonnegative_on_probes() {
    let bundle = sens_default_bundle();
    let Kernel::Separable(terms) = &bundle.problem.kernel else {
        panic!("expected a separable kernel");
    };
    let mut rng = Rng::from_seed(83);
    for _ in 0..300 {
        let x = random_x(&mut rng);
        let mut obs = x.to_vec();
        obs.push(1.0);
        obs.push(0.0);
        let beta = [SENS_BETA_STAR + rng.uniform_in(-2.0, 2.0)];
        let up = rng.uniform_in(-0.5, 0.5);
        let u = rng.uniform_in(-0.5, 0.5);
        let mut total = 0.0;
        for term in terms {
            let mut l = [0.0];
            let mut r = [0.0];
            (term.left)(&obs, &beta, &[up], 1, &mut l);
            (term.right)(&obs, &beta, &[u], 1, &mut r);
            assert!(l[0] >= 0.0 && r[0] >= 0.0);
            total += l[0] * r[0];
        }
        assert!(total >= 0.0, "kernel {total}");
    }
}

#[test]
fn four_term_sums_agree_with_monte_carlo() {
    // E[stilde] under p(.,.|x,u) by exact sum vs 10^6 simulated draws
    let mut rng = Rng::from_seed(97);
    let x = random_x(&mut rng);
    let u = 0.2;
    let beta = SENS_BETA_STAR;

    let mut exact = 0.0;
    for y in [0.0, 1.0] {
        for a in [0.0, 1.0] {
            exact += working_score(y, a, &x, u, beta) * joint(y, a, &x, u, beta);
        }
    }

    let draws = 1_000_000;
    let sx = alt(&x);
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for i in 0..draws {
        let a = rng.bernoulli(expit(3.0 * sx + 2.0 * u));
        let y = rng.bernoulli(expit(4.0 * sx + beta * a + 2.0 * u));
        let s = working_score(y, a, &x, u, beta);
        let d = s - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (s - mean);
    }
    let sd = (m2 / (draws - 1) as f64).sqrt();
    let se = sd / (draws as f64).sqrt();
    assert!(
        (mean - exact).abs() <= 3.0 * se,
        "mc {mean} vs exact {exact} (3se {})",
        3.0 * se
    );
}

#[test]
fn working_score_mean_vanishes_under_working_law() {
    // simulate the working joint law directly: u from the uniform working
    // density, then (a, y) from the conditional displays at beta*
    let mut rng = Rng::from_seed(101);
    let n = 100_000;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for i in 0..n {
        let x = random_x(&mut rng);
        let u = rng.uniform_in(-0.5, 0.5);
        let sx = alt(&x);
        let a = rng.bernoulli(expit(3.0 * sx + 2.0 * u));
        let y = rng.bernoulli(expit(4.0 * sx + SENS_BETA_STAR * a + 2.0 * u));
        let s = working_score(y, a, &x, u, SENS_BETA_STAR);
        let d = s - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (s - mean);
    }
    let se = (m2 / (n - 1) as f64).sqrt() / (n as f64).sqrt();
    assert!(mean.abs() <= 3.0 * se, "score mean {mean} (3se {})", 3.0 * se);
}

#[test]
fn negative_lambda_is_rejected() {
    assert!(sens_bundle(|_u, _x| 1.0, -0.001).is_err());
    assert!(sens_bundle(|_u, _x| 1.0, f64::NAN).is_err());
    assert!(sens_bundle(|_u, _x| 1.0, 0.0).is_ok());
}

#[test]
fn vanishing_working_density_is_reported() {
    let bundle = sens_bundle(|_u, _x| 0.0, 0.001).unwrap();
    let data = bundle_data(&bundle, 10, 3);
    let grid = quadrature::sample_grid(
        &bundle.problem.t_domain,
        &bundle.problem.s_domain,
        8,
        8,
        5,
    )
    .unwrap();
    let b0 = FnSolution::<fn(&[f64], &mut [f64])> {
        q: 1,
        input_dim: 1 + SENS_P,
        f: |_pt, out| out.fill(0.0),
    };
    let err = loss_k(&bundle.problem, &b0, &data, &[SENS_BETA_STAR], &grid).unwrap_err();
    assert!(matches!(err, FredholmError::NonFinite { .. }), "got {err:?}");
}

fn bundle_data(bundle: &examples::ExampleBundle, n: usize, seed: u64) -> Dataset {
    (bundle.generate)(n, seed).estimator
}
