use nalgebra::Vector3;
use proptest::prelude::*;

use uncpnp::bench::{generate_trial, rotation_error, translation_error, trial_rng, NoiseMode, NoiseSchedule, SceneSpec};
use uncpnp::geometry::so3_exp;
use uncpnp::robust::{gate, solve, DEFAULT_TAU2};
use uncpnp::{Pose, SolverChoice};

fn method() -> impl Strategy<Value = &'static str> {
    prop::sample::select(vec!["epnpu", "epnplu", "dlsu", "dlslu"])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn covariance_scale_does_not_move_the_estimate(seed in 0u64..1000, c in 0.1f64..10.0, m in method()) {
        let trial = generate_trial(&SceneSpec::new(15, 5), &NoiseSchedule::new(NoiseMode::Lines), &mut trial_rng(seed, 0, 0)).unwrap();
        let mut scaled = trial.corr.clone();
        for p in &mut scaled.points {
            p.cov_x *= c;
            p.cov_u *= c;
        }
        for l in &mut scaled.lines {
            l.cov_p *= c;
            l.cov_q *= c;
            l.sigma_l2 *= c;
        }
        let choice = SolverChoice::parse(m).unwrap();
        let a = solve(&choice, &trial.corr, None, Some(trial.mean_depth)).unwrap();
        let b = solve(&choice, &scaled, None, Some(trial.mean_depth)).unwrap();
        prop_assert!(rotation_error(&a.rotation, &b.rotation) < 1e-5);
        prop_assert!(translation_error(&a.translation, &b.translation) < 1e-4);
    }

    #[test]
    fn estimate_follows_a_change_of_world_frame(
        seed in 0u64..1000,
        w in prop::array::uniform3(-1.0f64..1.0),
        s in prop::array::uniform3(-2.0f64..2.0),
        m in method(),
    ) {
        let trial = generate_trial(&SceneSpec::new(15, 5), &NoiseSchedule::new(NoiseMode::Lines), &mut trial_rng(seed, 1, 0)).unwrap();
        let g = Pose::new(so3_exp(&Vector3::from(w)), Vector3::from(s));
        let mut moved = trial.corr.clone();
        for p in &mut moved.points {
            p.x = g.transform(&p.x);
            p.cov_x = g.rotation * p.cov_x * g.rotation.transpose();
        }
        for l in &mut moved.lines {
            l.p = g.transform(&l.p);
            l.q = g.transform(&l.q);
            l.cov_p = g.rotation * l.cov_p * g.rotation.transpose();
            l.cov_q = g.rotation * l.cov_q * g.rotation.transpose();
        }
        let choice = SolverChoice::parse(m).unwrap();
        let a = solve(&choice, &trial.corr, None, Some(trial.mean_depth)).unwrap();
        let b = solve(&choice, &moved, None, Some(trial.mean_depth)).unwrap().compose(&g);
        prop_assert!(rotation_error(&a.rotation, &b.rotation) < 1e-5);
        prop_assert!(translation_error(&a.translation, &b.translation) < 1e-4);
    }

    #[test]
    fn exact_features_pass_any_gate(seed in 0u64..1000, n in 3usize..40) {
        let exact = NoiseSchedule { realize: false, ..NoiseSchedule::new(NoiseMode::Lines) };
        let trial = generate_trial(&SceneSpec::new(n, n / 2), &exact, &mut trial_rng(seed, 2, 0)).unwrap();
        prop_assert!(gate(&trial.pose, &trial.corr, DEFAULT_TAU2).into_iter().all(|b| b));
    }
}
