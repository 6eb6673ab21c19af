use std::f64::consts::PI;

use nalgebra::{UnitQuaternion, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use treeik::denoiser::{GoalSet, GoalSlot};
use treeik::fixtures;
use treeik::kinematics::{forward_kinematics, parse_robot, sample_config, Pose, RobotModel};
use treeik::refiner::*;

fn two_r() -> RobotModel {
    parse_robot(&fixtures::planar_chain(2, 1.0, 3.0)).unwrap()
}

/// Narrow limits leave one feasible winding of the end-effector yaw.
fn two_r_narrow() -> RobotModel {
    parse_robot(&fixtures::planar_chain(2, 1.0, 1.5)).unwrap()
}

fn dual() -> RobotModel {
    parse_robot(fixtures::DUAL_WAIST).unwrap()
}

fn goals_at(model: &RobotModel, q: &[f64]) -> GoalSet {
    GoalSet::full(&forward_kinematics(model, q).unwrap())
}

fn in_limits(model: &RobotModel, q: &[f64]) -> bool {
    model
        .limits()
        .unwrap()
        .iter()
        .zip(q)
        .all(|((lo, hi), v)| *lo <= *v && *v <= *hi)
}

#[test]
fn seed_at_solution_needs_no_iterations() {
    let m = two_r();
    let q = [0.4, -1.1];
    let r = refine(&m, &goals_at(&m, &q), &q, &RefineConfig::default()).unwrap();
    assert!(r.success);
    assert_eq!(r.iters_used, 0);
    assert_eq!(r.q_final, q.to_vec());
}

#[test]
fn reachable_two_link_goals_converge_from_random_seeds() {
    let m = two_r_narrow();
    let cfg = RefineConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ok = 0;
    let n = 100;
    for _ in 0..n {
        let target = sample_config(&m, &mut rng).unwrap();
        let seed = sample_config(&m, &mut rng).unwrap();
        let r = refine(&m, &goals_at(&m, &target), &seed, &cfg).unwrap();
        if r.success {
            ok += 1;
            assert!(r.pos_err[0].unwrap() <= cfg.pos_tol && r.ang_err[0].unwrap() <= cfg.ang_tol);
            // the full pose pins a unique configuration inside these limits
            assert!((r.q_final[0] - target[0]).abs() < 1e-3 && (r.q_final[1] - target[1]).abs() < 1e-3);
        }
    }
    assert!(ok * 100 > 80 * n, "{ok}/{n} converged");
}

#[test]
fn unreachable_goal_lands_on_closest_reach() {
    // straight arm along x meets the orientation, so the only residual is the shortfall
    let m = two_r();
    let goal = Pose::new(Vector3::new(2.5, 0.0, 0.0), UnitQuaternion::identity());
    let gs = GoalSet::full(&[goal]);
    let r = refine(&m, &gs, &[0.3, 0.4], &RefineConfig::default()).unwrap();
    assert!(!r.success);
    let pos = r.pos_err[0].unwrap();
    assert!((pos - 0.5).abs() < 1e-3, "pos error {pos}");
    assert!(r.q_final.iter().all(|v| v.is_finite()));
    assert!(r.diagnostic.is_some());
}

#[test]
fn rejects_bad_inputs() {
    let m = two_r();
    let gs = goals_at(&m, &[0.1, 0.2]);
    let cfg = RefineConfig::default();
    assert!(matches!(
        solve_batch(&m, &gs, &[], &cfg, SeedSource::Random),
        Err(RefineError::NoSeeds)
    ));
    assert!(matches!(
        refine(&m, &GoalSet::new(vec![GoalSlot::Unspecified]), &[0.0, 0.0], &cfg),
        Err(RefineError::NoSpecifiedGoal)
    ));
    assert!(matches!(
        refine(&m, &GoalSet::new(vec![]), &[0.0, 0.0], &cfg),
        Err(RefineError::GoalCount { .. })
    ));
    assert!(matches!(refine(&m, &gs, &[0.0], &cfg), Err(RefineError::Kinematics(_))));
}

#[test]
fn partial_goals_leave_unspecified_slots_empty() {
    let m = dual();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let q = sample_config(&m, &mut rng).unwrap();
    let poses = forward_kinematics(&m, &q).unwrap();
    let gs = GoalSet::new(vec![GoalSlot::Specified(poses[0]), GoalSlot::Unspecified]);
    let seed = sample_config(&m, &mut rng).unwrap();
    let r = refine(&m, &gs, &seed, &RefineConfig::default()).unwrap();
    assert!(r.pos_err[0].is_some());
    assert_eq!(r.pos_err[1], None);
    assert_eq!(r.ang_err[1], None);
}

#[test]
fn batch_best_is_lowest_residual_success() {
    let m = two_r();
    let gs = goals_at(&m, &[0.7, 1.2]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let seeds: Vec<Vec<f64>> = (0..16).map(|_| sample_config(&m, &mut rng).unwrap()).collect();
    let (best, all) = solve_batch(&m, &gs, &seeds, &RefineConfig::default(), SeedSource::Random).unwrap();
    assert_eq!(all.len(), 16);
    assert!(all.iter().all(|r| r.source == SeedSource::Random));
    let min = all
        .iter()
        .filter(|r| r.success)
        .map(|r| r.residual)
        .fold(f64::INFINITY, f64::min);
    assert!(best.success);
    assert_eq!(best.residual, min);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn limits_hold_and_success_matches_recomputed_errors(
        seed in any::<u64>(),
        scale in 0.0f64..3.0,
    ) {
        let m = dual();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = sample_config(&m, &mut rng).unwrap();
        let gs = goals_at(&m, &target);
        // seeds may start outside the box; the refiner projects them in
        let start: Vec<f64> = sample_config(&m, &mut rng)
            .unwrap()
            .iter()
            .map(|v| v * scale)
            .collect();
        let cfg = RefineConfig::default();
        let r = refine(&m, &gs, &start, &cfg).unwrap();
        prop_assert!(in_limits(&m, &r.q_final));
        let errs = goal_errors(&m, &gs, &r.q_final).unwrap();
        let within = errs
            .iter()
            .flatten()
            .all(|(p, a)| *p <= cfg.pos_tol && *a <= cfg.ang_tol);
        prop_assert_eq!(within, r.success);
        for (e, (p, a)) in errs.iter().zip(r.pos_err.iter().zip(&r.ang_err)) {
            let (ep, ea) = e.unwrap();
            prop_assert!((ep - p.unwrap()).abs() < 1e-12);
            prop_assert!((ea - a.unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_never_increases_with_more_iterations(seed in any::<u64>()) {
        let m = two_r();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = [rng.random_range(-PI..PI).clamp(-3.0, 3.0), rng.random_range(-3.0..3.0)];
        let gs = goals_at(&m, &target);
        let start = sample_config(&m, &mut rng).unwrap();
        let mut last = f64::INFINITY;
        for k in 1..12 {
            let cfg = RefineConfig { max_iters: k, ..RefineConfig::default() };
            let r = refine(&m, &gs, &start, &cfg).unwrap();
            prop_assert!(r.residual <= last);
            prop_assert!(r.iters_used <= k);
            last = r.residual;
        }
    }
}
