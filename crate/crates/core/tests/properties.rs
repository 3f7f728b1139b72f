use proptest::prelude::*;

use lstd_lab::analysis::{fixed_point, lemma1_tail_bound, prop1_closed_forms};
use lstd_lab::engine::{forward_a_boyan, forward_a_uncorrected, forward_b, LstdEstimator, Strategy as Update, TraceState};
use lstd_lab::harness::{best_over_alpha, read_records, run_cell, run_sweep, write_records, Algorithm, ExperimentConfig, MrpTriple, ResultRecord};
use lstd_lab::linalg::{linear_system_inverse, rank_one_update, sherman_morrison, solve_regularized, Matrix, Vector};
use lstd_lab::mrp::{build_features, generate_random_mrp, stationary_distribution, true_values, FeatureKind, Trajectory};

fn vec_strategy(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0..2.0f64, d)
}

prop_compose! {
    fn trajectory()(d in 1usize..=8, steps in 1usize..=50)
        (features in prop::collection::vec(vec_strategy(d), steps + 2),
         rewards in prop::collection::vec(-3.0..3.0f64, steps + 1),
         steps in Just(steps)) -> (Trajectory, usize) {
        (Trajectory::from_parts(features.into_iter().map(Vector::from).collect(), rewards), steps)
    }
}

fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).unwrap().max_abs() / b.max_abs().max(1.0)
}

/// Diagonally dominant, hence well conditioned.
fn dominant(d: usize, entries: &[f64]) -> Matrix {
    let mut m = Matrix::from_fn(d, d, |i, j| entries[i * d + j]);
    for i in 0..d {
        let s: f64 = m.row(i).iter().map(|x| x.abs()).sum();
        m.add_outer(s + 1.0, &unit(d, i), &unit(d, i));
    }
    m
}

fn unit(d: usize, i: usize) -> Vec<f64> {
    (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn recursions_equal_forward_views((traj, steps) in trajectory(), lambda in 0.0..=1.0f64, gamma in 0.0..0.999f64) {
        let d = traj.features[0].dim();
        let mut unc = LstdEstimator::new(Update::Uncorrected, d, lambda, gamma);
        let mut boy = LstdEstimator::new(Update::Boyan, d, lambda, gamma);
        let mut mix = LstdEstimator::new(Update::Mixed, d, lambda, gamma);
        let mut trace = TraceState::new(d, lambda, gamma);
        for t in 0..steps {
            let (phi, r, next) = (&traj.features[t], traj.rewards[t], &traj.features[t + 1]);
            let unc_before = unc.a().clone();
            unc.step_uncorrected(phi, r);
            boy.step_boyan(phi, next, r);
            mix.mixed_first_half(phi, r);
            prop_assert!(rel_err(mix.a(), unc.a()) <= 1e-10);
            mix.mixed_second_half(next);
            prop_assert!(rel_err(mix.a(), boy.a()) <= 1e-10);
            trace.update(phi);
            // A^Unc_{t+1} = A^Boy_t + z_t φ_tᵀ, with A^Boy_t the matrix one step back
            let mut bridged = unc_before.clone();
            let z_prev = trace.z_prev().unwrap();
            bridged.add_outer(-gamma, z_prev, phi);
            bridged.add_outer(1.0, trace.z(), phi);
            prop_assert!(bridged.sub(unc.a()).unwrap().max_abs() <= 1e-10 * unc.a().max_abs().max(1.0));
        }
        prop_assert!(rel_err(unc.a(), &forward_a_uncorrected(&traj, lambda, gamma, steps)) <= 1e-9);
        prop_assert!(rel_err(boy.a(), &forward_a_boyan(&traj, lambda, gamma, steps)) <= 1e-9);
        let fb = forward_b(&traj, lambda, gamma, steps);
        let scale = fb.norm_inf().max(1.0);
        for (x, y) in unc.b().iter().zip(fb.iter()) {
            prop_assert!((x - y).abs() <= 1e-9 * scale);
        }
        prop_assert_eq!(unc.b(), boy.b());
        prop_assert_eq!(boy.b(), mix.b());

        let mut boy_from_unc = unc.a().clone();
        boy_from_unc.add_outer(-gamma, trace.z(), &traj.features[steps]);
        prop_assert!(boy_from_unc.sub(boy.a()).unwrap().max_abs() <= 1e-10 * boy.a().max_abs().max(1.0));
    }

    #[test]
    fn trace_is_discounted_sum((traj, steps) in trajectory(), lambda in 0.0..=1.0f64, gamma in 0.0..1.0f64) {
        let d = traj.features[0].dim();
        let mut trace = TraceState::new(d, lambda, gamma);
        for t in 0..steps {
            trace.update(&traj.features[t]);
        }
        for j in 0..d {
            let explicit: f64 = (0..steps).map(|t| (lambda * gamma).powi((steps - 1 - t) as i32) * traj.features[t][j]).sum();
            prop_assert!((trace.z()[j] - explicit).abs() <= 1e-10 * explicit.abs().max(1.0));
        }
    }

    #[test]
    fn sherman_morrison_inverts_rank_one_update(
        d in 1usize..=8,
        entries in prop::collection::vec(-1.0..1.0f64, 64),
        u in vec_strategy(8),
        v in vec_strategy(8),
    ) {
        let a = dominant(d, &entries);
        let (u, v) = (&u[..d], &v[..d]);
        let inv = linear_system_inverse(&a).unwrap();
        let updated = rank_one_update(&a, u, v).unwrap();
        match sherman_morrison(&inv, u, v) {
            Ok(sm) => {
                let prod = sm.matmul(&updated).unwrap();
                prop_assert!(prod.sub(&Matrix::identity(d)).unwrap().max_abs() <= 1e-8);
            }
            // only when the update makes A + uvᵀ (numerically) singular
            Err(_) => prop_assert!(linear_system_inverse(&updated).map_or(true, |m| m.max_abs() > 1e10)),
        }
    }

    #[test]
    fn solve_reproduces_rhs(d in 1usize..=8, entries in prop::collection::vec(-1.0..1.0f64, 64), b in vec_strategy(8)) {
        let a = dominant(d, &entries);
        let x = solve_regularized(&a, &b[..d], 0.0).unwrap();
        let back = a.matvec(&x).unwrap();
        let scale = b[..d].iter().fold(1.0f64, |m, x| m.max(x.abs()));
        for (p, q) in back.iter().zip(&b[..d]) {
            prop_assert!((p - q).abs() <= 1e-9 * scale);
        }
        let twice = linear_system_inverse(&linear_system_inverse(&a).unwrap()).unwrap();
        prop_assert!(twice.sub(&a).unwrap().max_abs() <= 1e-6);
    }

    #[test]
    fn random_mrps_are_well_formed(n in 1usize..=30, branch_frac in 0.0..1.0f64, sigma in 0.0..1.0f64, seed: u64) {
        let branch = 1 + (branch_frac * n as f64) as usize % n;
        let m = generate_random_mrp(n, branch, sigma, seed).unwrap();
        prop_assert_eq!(&m, &generate_random_mrp(n, branch, sigma, seed).unwrap());
        m.validate().unwrap();
        for s in 0..n {
            prop_assert_eq!(m.successors(s).count(), branch);
        }
        let pi = stationary_distribution(&m).unwrap();
        let moved = m.transitions.transpose().matvec(&pi).unwrap();
        for (a, b) in moved.iter().zip(pi.iter()) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
        let v = true_values(&m, 0.9).unwrap();
        let pv = m.transitions.matvec(&v).unwrap();
        for s in 0..n {
            prop_assert!((v[s] - m.rewards[s] - 0.9 * pv[s]).abs() <= 1e-10);
        }
    }

    #[test]
    fn tabular_fixed_point_is_exact(n in 2usize..=12, seed: u64, lambda in 0.0..=1.0f64, gamma in 0.0..0.95f64) {
        let m = generate_random_mrp(n, n, 0.1, seed).unwrap();
        let f = build_features(&m, FeatureKind::Tabular, 0);
        let fp = fixed_point(&m, &f, lambda, gamma).unwrap();
        let v = true_values(&m, gamma).unwrap();
        for (a, b) in fp.theta_bar.iter().zip(v.iter()) {
            prop_assert!((a - b).abs() <= 1e-8 * v.norm_inf().max(1.0));
        }
        let resid = fp.a_bar.matvec(&fp.theta_bar).unwrap();
        for (r, b) in resid.iter().zip(fp.b_bar.iter()) {
            prop_assert!((r - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn tail_bound_shrinks_with_t(c in 0.1..5.0f64, lambda in 0.0..=1.0f64, gamma in 0.01..0.99f64, t in 1usize..5000) {
        prop_assert!(lemma1_tail_bound(c, lambda, gamma, t + 1) < lemma1_tail_bound(c, lambda, gamma, t));
    }

    #[test]
    fn uncorrected_shrinks_and_is_noisier_ratio(lambda in 0.0..=1.0f64, gamma in 0.01..0.99f64, t in 1usize..2000, mu in 0.1..5.0f64) {
        let r = prop1_closed_forms(lambda, gamma, t, mu, 1.0).unwrap();
        prop_assert!(r.bias_unc_exact < 0.0);
        prop_assert!(r.var_ratio_exact > 1.0);
        prop_assert!(r.var_theta_unc < r.var_theta_boy);
        prop_assert!((r.a_unc_t - r.a_boy_t - r.delta_t).abs() <= 1e-12 * r.a_unc_t);
    }
}

fn synthetic(alpha: f64, run: usize, mse: f64) -> ResultRecord {
    ResultRecord {
        mrp: "small".into(),
        features: FeatureKind::Binary,
        algo: Algorithm::Mixed,
        lambda: 0.91,
        alpha,
        run,
        seed: run as u64 * 7919,
        mse,
        wall_ms: 1.5,
        failed: false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn csv_round_trip_preserves_aggregate(mses in prop::collection::vec(0.0..10.0f64, 17 * 20)) {
        let records: Vec<ResultRecord> = mses
            .iter()
            .enumerate()
            .map(|(i, &m)| synthetic(2f64.powi(i as i32 % 17 - 8), i / 17, m))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_records(&records, &path).unwrap();
        let back = read_records(&path).unwrap();
        prop_assert_eq!(back.len(), records.len());
        prop_assert_eq!(best_over_alpha(&back), best_over_alpha(&records));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn sweeps_are_deterministic_and_thread_independent(base_seed: u64, threads in 2usize..6, kind_idx in 0usize..3) {
        let kind = [FeatureKind::Tabular, FeatureKind::Binary, FeatureKind::Nonbinary][kind_idx];
        let config = ExperimentConfig {
            mrp_triple: MrpTriple { n: 8, branch: 3, sigma: 0.1 },
            feature_kind: kind,
            algorithms: vec![Algorithm::Uncorrected, Algorithm::Boyan, Algorithm::Mixed, Algorithm::TdBaseline],
            lambda_grid: vec![0.0, 0.9, 1.0],
            alpha_grid: vec![0.5, 2.0],
            td_step_sizes: vec![0.05],
            steps: 60,
            runs: 3,
            base_seed,
            gamma: 0.9,
            ..ExperimentConfig::default()
        };
        let serial = run_sweep(&config, 1).unwrap();
        let parallel = run_sweep(&config, threads).unwrap();
        prop_assert_eq!(serial.len(), 3 * 3 * 2 * 3 + 3 * 3);
        for (a, b) in serial.iter().zip(&parallel) {
            prop_assert!(a.same_outcome(b));
        }
        let single = run_cell(&config, Algorithm::Boyan, 1, 1, 2).unwrap();
        let hit = serial.iter().find(|r| r.algo == Algorithm::Boyan && r.lambda == 0.9 && r.alpha == 2.0 && r.run == 2).unwrap();
        prop_assert!(hit.same_outcome(&single));
    }
}
