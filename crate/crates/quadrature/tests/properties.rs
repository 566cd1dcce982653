//! Property tests for the Monte Carlo rule and grid determinism.

use proptest::prelude::*;
use quadrature::{mc_integral, sample_grid, Domain};

#[test]
fn rms_error_halves_when_j_quadruples() {
    // f(s) = s on [0,1]: exact integral 1/2. RMS error over 50 seeds at J
    // and 4J should shrink by ~2 (Monte Carlo 1/sqrt(J) rate).
    let d = Domain::interval(0.0, 1.0).unwrap();
    let rms = |j: usize| -> f64 {
        let mut acc = 0.0;
        for seed in 0..50u64 {
            let g = sample_grid(&d, &d, 1, j, 1000 + seed).unwrap();
            let v = mc_integral(|p| p[0], g.inner_points(), 1, g.inner_volume()).unwrap();
            acc += (v - 0.5) * (v - 0.5);
        }
        (acc / 50.0).sqrt()
    };
    let e1 = rms(500);
    let e2 = rms(2000);
    let ratio = e1 / e2;
    assert!((1.6..=2.5).contains(&ratio), "ratio {ratio} (errors {e1:e}, {e2:e})");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn constant_exactness(c in -100.0f64..100.0, j in 1usize..400, seed in any::<u64>()) {
        let d = Domain::interval(-2.0, 3.0).unwrap();
        let g = sample_grid(&d, &d, 1, j, seed).unwrap();
        let v = mc_integral(|_| c, g.inner_points(), 1, g.inner_volume()).unwrap();
        prop_assert!((v - 5.0 * c).abs() <= 1e-12 * c.abs().max(1.0));
    }

    #[test]
    fn linearity(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>()) {
        let d = Domain::interval(0.0, 2.0).unwrap();
        let g = sample_grid(&d, &d, 1, 97, seed).unwrap();
        let f = |p: &[f64]| p[0].sin();
        let h = |p: &[f64]| p[0] * p[0];
        let lhs = mc_integral(|p| a * f(p) + b * h(p), g.inner_points(), 1, g.inner_volume()).unwrap();
        let rhs = a * mc_integral(f, g.inner_points(), 1, g.inner_volume()).unwrap()
            + b * mc_integral(h, g.inner_points(), 1, g.inner_volume()).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn grids_deterministic(seed in any::<u64>(), j1 in 1usize..50, j2 in 1usize..50) {
        let t = Domain::interval(-5.0, 5.0).unwrap();
        let s = Domain::interval(-0.5, 0.5).unwrap();
        let g1 = sample_grid(&t, &s, j1, j2, seed).unwrap();
        let g2 = sample_grid(&t, &s, j1, j2, seed).unwrap();
        prop_assert_eq!(g1.outer_points(), g2.outer_points());
        prop_assert_eq!(g1.inner_points(), g2.inner_points());
    }
}
