use proptest::prelude::*;

use clt_core::linalg::{self, Matrix};
use clt_core::markov::{self, FiniteMarkovChain, RewardMap, Start};
use clt_core::stats::{self, SampleSet};
use clt_core::stein::{self, MartingaleStats};
use clt_core::td::{self, TdModel};

fn scalars(v: Vec<f64>) -> SampleSet {
    SampleSet::from_scalars(v).unwrap()
}

/// Multiples of 1/8 in a small range: sums and differences stay exact.
fn dyadic(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-400i32..400).prop_map(|k| k as f64 / 8.0), len)
}

fn chain_rows(max_states: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2..=max_states).prop_flat_map(|s| {
        prop::collection::vec(prop::collection::vec(0.05f64..1.0, s), s).prop_map(|rows| {
            rows.into_iter()
                .map(|r| {
                    let total: f64 = r.iter().sum();
                    let mut r: Vec<f64> = r.iter().map(|x| x / total).collect();
                    let rest: f64 = r[1..].iter().sum();
                    r[0] = 1.0 - rest;
                    r
                })
                .collect()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn w1_is_a_metric(
        x in prop::collection::vec(-10.0f64..10.0, 1..30),
        y in prop::collection::vec(-10.0f64..10.0, 1..30),
        z in prop::collection::vec(-10.0f64..10.0, 1..30),
    ) {
        let (x, y, z) = (scalars(x), scalars(y), scalars(z));
        let xy = stats::w1_exact_1d(&x, &y).unwrap();
        prop_assert_eq!(xy, stats::w1_exact_1d(&y, &x).unwrap());
        prop_assert!(xy >= 0.0);
        let via = stats::w1_exact_1d(&x, &z).unwrap() + stats::w1_exact_1d(&z, &y).unwrap();
        prop_assert!(xy <= via + 1e-12);
    }

    #[test]
    fn w1_zero_exactly_on_equal_multisets(x in prop::collection::vec(-10.0f64..10.0, 1..30), seed in any::<u64>()) {
        let mut shuffled = x.clone();
        let k = (seed as usize) % shuffled.len();
        shuffled.rotate_left(k);
        prop_assert_eq!(stats::w1_exact_1d(&scalars(x.clone()), &scalars(shuffled)).unwrap(), 0.0);
        let mut moved = x.clone();
        moved[0] += 1.0;
        prop_assert!(stats::w1_exact_1d(&scalars(x), &scalars(moved)).unwrap() > 0.0);
    }

    #[test]
    fn w1_translation_equivariance(x in dyadic(1..20), y in dyadic(1..20), c in (-64i32..64).prop_map(|k| k as f64 / 4.0)) {
        let (xs, ys) = (scalars(x), scalars(y));
        let base = stats::w1_exact_1d(&xs, &ys).unwrap();
        let moved = stats::w1_exact_1d(&xs.translated(&[c]), &ys.translated(&[c])).unwrap();
        prop_assert_eq!(base, moved);
        prop_assert_eq!(stats::w1_exact_1d(&xs.translated(&[c]), &xs).unwrap(), c.abs());
    }

    #[test]
    fn sliced_is_bounded_by_its_largest_projection(
        pts_x in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 2..40),
        pts_y in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 2..40),
        seed in any::<u64>(),
    ) {
        let xs = SampleSet::from_vectors(&pts_x).unwrap();
        let ys = SampleSet::from_vectors(&pts_y).unwrap();
        let ab = stats::sliced_w1(&xs, &ys, 12, seed).unwrap();
        let ba = stats::sliced_w1(&ys, &xs, 12, seed).unwrap();
        prop_assert_eq!(ab.estimate, ba.estimate);
        let max = ab.per_direction.iter().cloned().fold(0.0, f64::max);
        prop_assert!(ab.estimate.value >= 0.0 && ab.estimate.value <= max + 1e-12);
    }

    #[test]
    fn bound_is_monotone_in_every_entry(
        base in prop::collection::vec((0.0f64..3.0, 0.0f64..3.0, 0.0f64..1.0), 1..40),
        index in any::<prop::sample::Index>(),
        which in 0usize..3,
        bump in 0.0f64..2.0,
        beta in 0.05f64..0.95,
    ) {
        let (m2, (m0, cov)): (Vec<f64>, (Vec<f64>, Vec<f64>)) =
            base.iter().map(|&(a, b, c)| (a, (b, c))).unzip();
        let c = stein::stein_constants(2, beta).unwrap();
        let before = stein::martingale_clt_bound(&MartingaleStats::new(m2.clone(), m0.clone(), cov.clone(), 1.7).unwrap(), &c).unwrap();
        let (mut m2, mut m0, mut cov) = (m2, m0, cov);
        let k = index.index(m2.len());
        match which {
            0 => m2[k] += bump,
            1 => m0[k] += bump,
            _ => cov[k] += bump,
        }
        let after = stein::martingale_clt_bound(&MartingaleStats::new(m2, m0, cov, 1.7).unwrap(), &c).unwrap();
        prop_assert!(after >= before);
    }

    #[test]
    fn stein_constants_increase_in_beta_and_d(d in 1usize..30, b1 in 0.01f64..0.98, gap in 0.001f64..0.2) {
        let b2 = (b1 + gap).min(0.995);
        let lo = stein::stein_constants(d, b1).unwrap();
        let hi = stein::stein_constants(d, b2).unwrap();
        prop_assert!(hi.c1_tilde > lo.c1_tilde && hi.c2_tilde > lo.c2_tilde);
        let next = stein::stein_constants(d + 1, b1).unwrap();
        prop_assert!(next.c1_tilde > lo.c1_tilde && next.c2_tilde > lo.c2_tilde);
        prop_assert!((lo.c1_tilde - lo.c1 - 2.0 / (1.0 - b1)).abs() < 1e-12 * lo.c1_tilde);
    }

    #[test]
    fn poisson_solution_is_exact_on_random_chains(
        rows in chain_rows(8),
        seed in prop::collection::vec(-3.0f64..3.0, 24),
    ) {
        let chain = FiniteMarkovChain::from_rows(&rows).unwrap();
        let s = chain.n_states();
        let reward = RewardMap::Vector((0..s).map(|i| vec![seed[i], seed[i + 8]]).collect());
        let sol = markov::solve_poisson(&chain, &reward).unwrap();
        prop_assert!(sol.residual(&reward) < 1e-10);
        prop_assert!(sol.centering_error() < 1e-10);
        let sigma = markov::asymptotic_covariance(&chain, &sol).unwrap();
        prop_assert!(sigma.matrix.is_symmetric(0.0));
        prop_assert!(sigma.min_eigenvalue >= -1e-12);
    }

    #[test]
    fn lyapunov_residual_is_small(
        m in prop::collection::vec(-1.0f64..1.0, 9),
        q in prop::collection::vec(-1.0f64..1.0, 9),
    ) {
        let m = Matrix::new(3, 3, m).unwrap();
        // −(MMᵀ + I) plus a skew part is Hurwitz
        let skew = &m - &m.transpose();
        let a = &(&(&m * &m.transpose()) + &Matrix::identity(3)).scale(-1.0) + &skew;
        let qm = Matrix::new(3, 3, q).unwrap();
        let q = &qm * &qm.transpose();
        let sigma = linalg::solve_lyapunov(&a, &q).unwrap();
        let scale = 1.0 + q.max_abs() + sigma.max_abs();
        prop_assert!(linalg::lyapunov_residual(&a, &q, &sigma).max_abs() < 1e-10 * scale);
        prop_assert!(linalg::min_eigenvalue(&sigma).unwrap() >= -1e-10 * scale);
    }

    #[test]
    fn psd_square_root_squares_back(m in prop::collection::vec(-2.0f64..2.0, 9)) {
        let m = Matrix::new(3, 3, m).unwrap();
        let s = &m * &m.transpose();
        let root = linalg::sqrt_psd(&s).unwrap();
        prop_assert!(root.is_symmetric(1e-12));
        prop_assert!((&(&root * &root) - &s).max_abs() < 1e-10 * (1.0 + s.max_abs()));
    }

    #[test]
    fn mean_dynamics_solves_the_mean_equation(
        rows in chain_rows(4),
        entries in prop::collection::vec(-0.4f64..0.4, 16),
        b in prop::collection::vec(-2.0f64..2.0, 8),
        delta in 0.55f64..0.95,
    ) {
        let chain = FiniteMarkovChain::from_rows(&rows).unwrap();
        let s = chain.n_states();
        let a: Vec<Matrix> = (0..s)
            .map(|i| {
                let mut m = Matrix::new(2, 2, entries[4 * i..4 * i + 4].to_vec()).unwrap();
                m[(0, 0)] += 1.5;
                m[(1, 1)] += 1.5;
                m
            })
            .collect();
        let bs: Vec<Vec<f64>> = (0..s).map(|i| b[2 * i..2 * i + 2].to_vec()).collect();
        let model = TdModel::new(chain, a, bs, delta).unwrap();
        let t = td::mean_dynamics(&model).unwrap();
        let r = t.a_bar.mul_vec(&t.theta_star);
        for (ri, bi) in r.iter().zip(&t.b_bar) {
            prop_assert!((ri + bi).abs() < 1e-10);
        }
        prop_assert!(t.limit_cov.is_symmetric(0.0));
        prop_assert!(linalg::min_eigenvalue(&t.limit_cov).unwrap() >= -1e-12);
    }

    #[test]
    fn upsilon_identities_on_scalar_grid(a in 0.3f64..3.0, delta in 0.55f64..0.95, n in 3usize..60, jf in 0.0f64..1.0) {
        let a_bar = Matrix::scalar(a);
        let j = ((n - 2) as f64 * jf) as usize;
        let eps = |k: usize| td::step_size(k as u64, delta).unwrap();
        let u = td::upsilon(j, n, delta, &a_bar).unwrap()[(0, 0)];
        let p = td::phi(j + 1, n + 1, delta, &a_bar).unwrap()[(0, 0)];
        prop_assert!((u + 1.0 / a - eps(j) / eps(j + 1) * (p + 1.0 / a)).abs() < 1e-10);
        let direct = td::upsilon(j + 1, n, delta, &a_bar).unwrap()[(0, 0)] - u;
        let closed = td::upsilon_difference(j, n, delta, &a_bar).unwrap()[(0, 0)];
        prop_assert!((direct - closed).abs() < 1e-10);
    }

    #[test]
    fn telescoping_on_random_trajectories(seed in any::<u64>(), n in 1usize..200, theta0 in -3.0f64..3.0) {
        let chain = FiniteMarkovChain::from_rows(&[vec![0.6, 0.4], vec![0.2, 0.8]]).unwrap();
        let model = TdModel::new(
            chain,
            vec![Matrix::scalar(0.5), Matrix::scalar(2.5)],
            vec![vec![1.0], vec![-3.0]],
            0.8,
        )
        .unwrap();
        let t = td::mean_dynamics(&model).unwrap();
        let traj = td::simulate_td(&model, n, &[theta0], &Start::Stationary, seed).unwrap();
        let (lhs, rhs) = td::telescoping_sides(&model, &traj, &t.theta_star).unwrap();
        prop_assert!((lhs[0] - rhs[0]).abs() < 1e-10 * (1.0 + rhs[0].abs()));
        let mean = traj.theta[1..].iter().map(|v| v[0]).sum::<f64>() / n as f64;
        prop_assert!((traj.theta_bar[n - 1][0] - mean).abs() < 1e-10);
    }
}
