use csma_mf::env::{averages, KernelMode};
use csma_mf::{
    build_kernel, ode_rhs, solve_fixed_point, stationary_dist, Mixture, NetworkSpec, RhoVector, SimConfig, SimState,
    SolverOptions, Spec,
};
use proptest::prelude::*;

fn arb_network() -> impl Strategy<Value = Spec> {
    (1usize..=4)
        .prop_flat_map(|n| {
            (
                Just(n),
                proptest::collection::vec(any::<bool>(), n * n),
                proptest::collection::vec(0.05f64..1.0, n),
                0.01f64..0.3,
                1.0f64..40.0,
                1.0f64..40.0,
            )
        })
        .prop_map(|(n, bits, w, p0, l, lc)| {
            let mut adjacency = vec![vec![false; n]; n];
            for c in 0..n {
                adjacency[c][c] = true;
                for d in 0..c {
                    adjacency[c][d] = bits[c * n + d];
                    adjacency[d][c] = bits[c * n + d];
                }
            }
            let s: f64 = w.iter().sum();
            let mut mu: Vec<f64> = w.iter().map(|x| x / s).collect();
            let head: f64 = mu[..n - 1].iter().sum();
            mu[n - 1] = 1.0 - head;
            NetworkSpec::exponential((1..=n).map(|c| c.to_string()).collect(), mu, adjacency, p0, l, lc, 12).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kernel_is_stochastic_and_law_is_invariant(spec in arb_network(), r in proptest::collection::vec(0.0f64..1.5, 4)) {
        let rho = RhoVector(r[..spec.n_classes()].to_vec());
        let kernel = build_kernel(&rho, &spec, KernelMode::Consistent).unwrap();
        prop_assert!(kernel.max_row_deviation() < 1e-12);
        let stat = stationary_dist(&kernel).unwrap();
        let total: f64 = stat.pi.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(stat.pi.iter().all(|&p| p >= 0.0));
        let moved = kernel.matrix().left_mul(&stat.pi);
        let l1: f64 = moved.iter().zip(&stat.pi).map(|(a, b)| (a - b).abs()).sum();
        prop_assert!(l1 < 1e-11);
    }

    #[test]
    fn averaged_rates_are_probabilities(spec in arb_network(), r in proptest::collection::vec(0.0f64..1.5, 4)) {
        let rho = RhoVector(r[..spec.n_classes()].to_vec());
        let (_, ghi) = averages(&rho, &spec, KernelMode::Consistent).unwrap();
        for c in 0..spec.n_classes() {
            prop_assert!(ghi.g[c] >= 0.0 && ghi.h[c] >= 0.0);
            prop_assert!(ghi.i[c] <= 1.0 + 1e-12);
            prop_assert_eq!(ghi.g[c] + ghi.h[c], ghi.i[c]);
        }
    }

    #[test]
    fn fixed_point_is_a_rest_point(spec in arb_network()) {
        let opts = SolverOptions { probes: 0, ..SolverOptions::default() };
        let fp = solve_fixed_point(&spec, &opts).unwrap();
        let drift = ode_rhs(&fp.q, &spec).unwrap();
        let worst = drift.rows().iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
        prop_assert!(worst < 1e-9, "drift {worst}");
        for c in 0..spec.n_classes() {
            prop_assert!((fp.q.class_mass(c) - spec.mu[c]).abs() < 1e-10);
            prop_assert!(fp.throughput.gamma[c] >= 0.0);
        }
    }

    #[test]
    fn simulator_state_stays_consistent(spec in arb_network(), n in 1usize..40, seed in any::<u64>()) {
        let mut state = SimState::new(&spec, &SimConfig::new(n, 3.0, seed)).unwrap();
        for _ in 0..200 {
            state.step();
            prop_assert!(state.is_consistent());
        }
    }
}

#[test]
fn single_precision_tracks_double() {
    let spec: Spec = NetworkSpec::chain3([0.3, 0.4, 0.3], 1.0 / 16.0, 20.0, 20.0, 32).unwrap();
    let fp64 = solve_fixed_point(
        &spec,
        &SolverOptions {
            probes: 0,
            ..SolverOptions::default()
        },
    )
    .unwrap();
    let spec32 = spec.cast::<f32>();
    let opts32 = SolverOptions {
        tol: 1e-6f32,
        probes: 0,
        ..SolverOptions::default()
    };
    let fp32 = solve_fixed_point(&spec32, &opts32).unwrap();
    for c in 0..3 {
        assert!((fp32.throughput.gamma[c] as f64 - fp64.throughput.gamma[c]).abs() < 1e-4);
    }
}

#[test]
fn level_zero_mixture_drifts_upward() {
    let spec = Spec::single_class(1.0 / 16.0, 1.0, 1.0, 16).unwrap();
    let drift = ode_rhs(&Mixture::at_level_zero(&spec), &spec).unwrap();
    assert!(drift.get(0, 0) < 0.0);
    assert!(drift.get(0, 1) > 0.0);
}
