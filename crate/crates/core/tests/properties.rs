use lsa_core::bounds::{compute_constants, higher_moment_bound, mean_square_bound, steady_state_term};
use lsa_core::counterexample::{exact_moment_recursion, stationary_moments, TwoPointScalarModel};
use lsa_core::linalg::{eig_extremes_symmetric, induced_norm, solve_lyapunov, symmetric_sqrt};
use lsa_core::lsa::{check_growth_bound, check_step_bound, simulate, StepSchedule};
use lsa_core::markov::{FiniteChain, MarkovNoiseModel};
use lsa_core::td::{compile_td0, max_pair_norm, TdProblem};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn matrix(d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0..1.0f64, d * d).prop_map(move |v| DMatrix::from_row_slice(d, d, &v))
}

fn hurwitz(d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    matrix(d).prop_map(move |m| {
        let shift = induced_norm(&m) + 1.0;
        m - DMatrix::identity(d, d) * shift
    })
}

/// Row-stochastic n×n with strictly positive entries.
fn positive_chain(n: usize) -> impl Strategy<Value = FiniteChain> {
    prop::collection::vec(0.05..1.0f64, n * n).prop_map(move |w| {
        let rows: Vec<Vec<f64>> = w
            .chunks(n)
            .map(|r| {
                let s: f64 = r.iter().sum();
                r.iter().map(|x| x / s).collect()
            })
            .collect();
        FiniteChain::from_rows(&rows).unwrap()
    })
}

/// Reversible chain from symmetric weights.
fn reversible_chain(n: usize) -> impl Strategy<Value = FiniteChain> {
    prop::collection::vec(0.05..1.0f64, n * n).prop_map(move |w| {
        let sym = |i: usize, j: usize| w[i.min(j) * n + i.max(j)];
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let s: f64 = (0..n).map(|j| sym(i, j)).sum();
                (0..n).map(|j| sym(i, j) / s).collect()
            })
            .collect();
        FiniteChain::from_rows(&rows).unwrap()
    })
}

/// Model with A_max ≤ 1 and centered b on a random positive chain.
fn valid_model(n: usize, d: usize) -> impl Strategy<Value = MarkovNoiseModel> {
    (
        positive_chain(n),
        prop::collection::vec(matrix(d), n),
        prop::collection::vec(prop::collection::vec(-1.0..1.0f64, d), n),
    )
        .prop_map(move |(chain, a, b)| {
            let a: Vec<DMatrix<f64>> = a
                .into_iter()
                .map(|m| {
                    let norm = induced_norm(&m);
                    if norm > 1.0 {
                        m / norm
                    } else {
                        m
                    }
                })
                .collect();
            let pi = chain.stationary_distribution().unwrap();
            let b: Vec<DVector<f64>> = b.into_iter().map(DVector::from_vec).collect();
            let mean = b.iter().zip(pi.iter()).fold(DVector::zeros(d), |acc, (v, p)| acc + v * *p);
            let b = b.into_iter().map(|v| v - &mean).collect();
            MarkovNoiseModel::new(chain, a, b).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lyapunov_round_trip(a in (1usize..8).prop_flat_map(hurwitz)) {
        let d = a.nrows();
        let cert = solve_lyapunov(&a).unwrap();
        prop_assert!(cert.hurwitz);
        prop_assert!(cert.residual <= 1e-10 * d as f64);
        prop_assert!(cert.gamma_min > 0.0 && cert.gamma_min <= cert.gamma_max);
        for t in 0..50 {
            let theta = DVector::from_fn(d, |i, _| ((i * 7 + t * 13) % 11) as f64 - 5.0);
            let q = cert.quadratic_form(&theta);
            let n2 = theta.norm_squared();
            prop_assert!(q >= cert.gamma_min * n2 * (1.0 - 1e-12));
            prop_assert!(q <= cert.gamma_max * n2 * (1.0 + 1e-12));
        }
        let s = symmetric_sqrt(&cert.p).unwrap();
        let (lo, hi) = eig_extremes_symmetric(&s).unwrap();
        prop_assert!((lo - cert.gamma_min.sqrt()).abs() <= 1e-10 * hi);
        prop_assert!((hi - cert.gamma_max.sqrt()).abs() <= 1e-10 * hi);
    }

    #[test]
    fn unstable_is_not_hurwitz(m in matrix(3)) {
        let a = &m + DMatrix::identity(3, 3) * (induced_norm(&m) + 0.5);
        let cert = solve_lyapunov(&a).unwrap();
        prop_assert!(!cert.hurwitz);
    }

    #[test]
    fn chain_powers_stay_stochastic(chain in positive_chain(4), k in 0usize..60) {
        let p = chain.power(k);
        for i in 0..4 {
            let row = p.row(i);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
            prop_assert!((row.sum() - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn mixing_time_monotone_in_delta(model in valid_model(3, 2)) {
        let deltas = [0.5, 0.2, 0.1, 0.05, 1e-2, 1e-3, 1e-4, 1e-6];
        let taus: Vec<usize> = deltas.iter().map(|&d| model.mixing_time(d).unwrap()).collect();
        prop_assert!(taus.windows(2).all(|w| w[0] <= w[1]), "{:?}", taus);
    }

    #[test]
    fn deviation_non_increasing_on_reversible(chain in reversible_chain(4), a in prop::collection::vec(-1.0..1.0f64, 4)) {
        let model = MarkovNoiseModel::scalar(chain, &a, &[0.0; 4]).unwrap();
        let profile = model.mixing_profile(400).unwrap();
        let dev = &profile.a_deviations;
        for w in dev.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-14, "{:?}", w);
        }
    }

    #[test]
    fn iid_conditional_means_constant(p in prop::collection::vec(0.05..1.0f64, 3), a in prop::collection::vec(-1.0..1.0f64, 3)) {
        let s: f64 = p.iter().sum();
        let p: Vec<f64> = p.iter().map(|x| x / s).collect();
        let model = MarkovNoiseModel::scalar(FiniteChain::iid(&p).unwrap(), &a, &[0.0; 3]).unwrap();
        let (one, _) = model.conditional_means(1);
        for k in 2..6 {
            let (ak, _) = model.conditional_means(k);
            for i in 0..3 {
                prop_assert!((ak[i][(0, 0)] - one[i][(0, 0)]).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn simulation_is_reconstructible(model in valid_model(3, 2), seed in any::<u64>(), eps in 0.001..0.2f64) {
        let s = StepSchedule::constant(eps).unwrap();
        let t = simulate(&model, &[1.0, -2.0], &s, 100, seed, None).unwrap();
        let again = simulate(&model, &[1.0, -2.0], &s, 100, seed, None).unwrap();
        prop_assert_eq!(&t.theta, &again.theta);
        let scale = t.theta.iter().map(|v| v.amax()).fold(1.0, f64::max);
        prop_assert!(t.reconstruction_error(&model) <= 1e-14 * scale);
        prop_assert_eq!(check_step_bound(&t, model.b_max()).violations, 0);
        prop_assert_eq!(check_growth_bound(&t, model.b_max()).violations, 0);
    }

    #[test]
    fn bound_monotone_and_linear(b in 0.0..2.0f64, gmin in 0.1..1.0f64, ratio in 1.0..4.0f64, tau in 1usize..6) {
        let gmax = gmin * ratio;
        let eps = 0.01 / (62.0 * gmax * (1.0 + b) * tau as f64 + gmax);
        let c = compute_constants(b, gmin, gmax, tau, eps).unwrap();
        let c2 = compute_constants(b, gmin, gmax, tau, 2.0 * eps).unwrap();
        prop_assert!(c.valid() && c2.valid());
        prop_assert_eq!(steady_state_term(&c2), 2.0 * steady_state_term(&c));
        let mut prev = f64::INFINITY;
        for k in (tau..tau + 200_000).step_by(5_000) {
            let v = mean_square_bound(&c, 1.0, k).unwrap();
            prop_assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn moment_bound_ratio(n in 1u32..20, cc in 0.1..10.0f64) {
        let c = compute_constants(0.5, 1.0, 1.0, 2, 1e-4).unwrap();
        let a = higher_moment_bound(&c, n, cc, 1.0).unwrap().bound;
        let b = higher_moment_bound(&c, n + 1, cc, 1.0).unwrap().bound;
        let expected = (2 * n + 1) as f64 * cc * c.eps_tau();
        prop_assert!((b / a / expected - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn td0_compiles_centered(
        chain in positive_chain(4),
        f in prop::collection::vec(-2.0..2.0f64, 8),
        r in prop::collection::vec(-1.0..1.0f64, 4),
        alpha in 0.0..0.95f64,
    ) {
        let features = DMatrix::from_row_slice(4, 2, &f);
        let problem = match TdProblem::new(chain, DVector::from_vec(r), alpha, features, 0.0) {
            Ok(p) => p,
            Err(_) => return Ok(()),
        };
        let c = compile_td0(&problem).unwrap();
        let m = c.pair_model().unwrap();
        prop_assert!((&c.a_tilde * &c.theta_star + &c.b_tilde).norm() <= 1e-10 * (1.0 + c.theta_star.norm()));
        prop_assert!(m.b_bar().norm() <= 1e-10 * (1.0 + m.b_max()));
        prop_assert!((m.a_bar() - &c.a_tilde).amax() <= 1e-12);
        prop_assert!(max_pair_norm(m) <= 1.0 + 1e-12);
    }

    #[test]
    fn second_moment_converges_to_fixed_point(eps in 0.01..0.3f64, theta0 in -5.0..5.0f64) {
        let model = TwoPointScalarModel::standard(eps).unwrap();
        let fp = stationary_moments(&model, 2).unwrap().unwrap();
        let k = (200.0 / eps) as usize;
        let t = exact_moment_recursion(&model, 2, k, theta0).unwrap();
        prop_assert!((t.moment(k, 2) - fp[2]).abs() <= 1e-8 * (1.0 + fp[2]));
    }
}
