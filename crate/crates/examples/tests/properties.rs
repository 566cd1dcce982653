//! Cross-bundle invariants: closure finiteness over wide random probes,
//! hidden-variable hygiene, and CSV round-trip properties.

use examples::{
    gen_mnar, mnar_default_bundle, mnar_views, read_dataset_csv, sens_default_bundle,
    shift_bundle, write_dataset_csv, ExampleBundle, MNAR_BETA_STAR, TRUTH_PREFIX,
};
use fredholm::{Dataset, Kernel};
use proptest::prelude::*;
use quadrature::Rng;

/// Evaluates every closure of the bundle (kernel parts, forcing, weight)
/// at `probes` random (point, observation, beta) triples with beta within
/// +-2 of beta*, asserting finiteness of each output.
fn probe_closures(bundle: &ExampleBundle, probes: usize, seed: u64) {
    let data = (bundle.generate)(200, seed).estimator;
    let mut rng = Rng::from_seed(seed ^ 0x5eed);
    let q = bundle.problem.q;
    let tdim = bundle.problem.t_domain.dim();
    let mut forcing_out = vec![0.0; q];
    let mut val = [0.0];
    for _ in 0..probes {
        let row = data.row(rng.next_u64() as usize % data.n()).to_vec();
        let beta: Vec<f64> = bundle
            .beta_star
            .iter()
            .map(|&b| b + rng.uniform_in(-2.0, 2.0))
            .collect();
        let t: Vec<f64> = (0..tdim)
            .map(|d| rng.uniform_in(bundle.problem.t_domain.lo()[d], bundle.problem.t_domain.hi()[d]))
            .collect();
        let s: Vec<f64> = (0..tdim)
            .map(|d| rng.uniform_in(bundle.problem.s_domain.lo()[d], bundle.problem.s_domain.hi()[d]))
            .collect();

        match &bundle.problem.kernel {
            Kernel::Zero => {}
            Kernel::Separable(terms) => {
                for term in terms {
                    (term.left)(&row, &beta, &s, tdim, &mut val);
                    assert!(val[0].is_finite(), "left part not finite at beta={beta:?}");
                    (term.right)(&row, &beta, &t, tdim, &mut val);
                    assert!(val[0].is_finite(), "right part not finite at beta={beta:?}");
                }
            }
            Kernel::Pointwise(k) => {
                let v = (k)(&row, &beta, &s, &t);
                assert!(v.is_finite(), "kernel not finite at beta={beta:?}");
            }
        }
        (bundle.problem.forcing)(&row, &beta, &t, tdim, &mut forcing_out);
        for (c, v) in forcing_out.iter().enumerate() {
            assert!(v.is_finite(), "forcing component {c} not finite at beta={beta:?}");
        }
        if let Some(w) = &bundle.problem.weight {
            (w)(&row, &beta, &t, tdim, &mut val);
            assert!(val[0].is_finite(), "weight not finite at beta={beta:?}");
        }
    }
}

#[test]
fn mnar_closures_finite_on_probe_sweep() {
    probe_closures(&mnar_default_bundle(), 10_000, 11);
}

#[test]
fn sens_closures_finite_on_probe_sweep() {
    probe_closures(&sens_default_bundle(), 10_000, 13);
}

#[test]
fn shift_closures_finite_on_probe_sweep() {
    probe_closures(&shift_bundle(), 10_000, 17);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// The estimator view is fully determined by the observable fields:
    /// corrupting the hidden response on missing rows changes nothing.
    #[test]
    fn mnar_estimator_view_ignores_hidden_response(
        seed in 0u64..1000,
        n in 20usize..120,
        garbage in -1e6f64..1e6,
    ) {
        let mut obs = gen_mnar(n, seed, MNAR_BETA_STAR);
        let clean = mnar_views(&obs);
        for o in &mut obs {
            if o.a == 0.0 {
                o.y_full = garbage;
            }
        }
        let dirty = mnar_views(&obs);
        prop_assert_eq!(clean.estimator.names(), dirty.estimator.names());
        for (a, b) in clean.estimator.raw().iter().zip(dirty.estimator.raw()) {
            prop_assert!((a.is_nan() && b.is_nan()) || a == b);
        }
        prop_assert!(clean.estimator.names().iter().all(|c| !c.starts_with(TRUTH_PREFIX)));
    }

    /// Any finite dataset survives the CSV write/read cycle bit-exactly,
    /// with NaN mapping through "NA".
    #[test]
    fn csv_round_trip_is_lossless(
        rows in prop::collection::vec(
            prop::collection::vec(
                prop_oneof![
                    4 => prop::num::f64::NORMAL,
                    1 => Just(f64::NAN),
                    1 => -1.0e-300f64..1.0e-300,
                ],
                3,
            ),
            1..30,
        )
    ) {
        let data = Dataset::from_rows(
            vec!["u".into(), "v".into(), "w".into()],
            &rows,
        ).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prop.csv");
        write_dataset_csv(&path, &data).unwrap();
        let back = read_dataset_csv(&path).unwrap();
        prop_assert_eq!(back.names(), data.names());
        for (a, b) in back.raw().iter().zip(data.raw()) {
            prop_assert!((a.is_nan() && b.is_nan()) || a == b, "{} vs {}", a, b);
        }
    }
}
