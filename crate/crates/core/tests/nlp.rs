use dampc_core::kinematics::{end_effector, min_obstacle_margin, ArmModel, Obstacle, Pose2};
use dampc_core::nlp::{
    constraint_residuals, mode_threshold, ocp_cost, plan_distance, random_initial_guess,
    solve_local, solve_multistart, stream_rng, warm_start_shift, DecisionVector, OcpConfig,
};
use rand::Rng;

/// A reach across a mid-range obstacle where going around either side
/// costs about the same.
fn crossing() -> (OcpConfig, ArmModel, Vec<f64>, Pose2, [f64; 2]) {
    let model = ArmModel::desk();
    let x0 = vec![-1.2, 0.8, 0.8];
    // On the x axis, at the radius of the start pose.
    let e0 = end_effector(&model, &x0).unwrap();
    let center = [e0.px.hypot(e0.py), 0.0];
    let cfg = OcpConfig::desk(3).with_obstacles(vec![Obstacle::circle(center, 0.15).unwrap()]);
    let yd = end_effector(&model, &[1.2, -0.8, -0.8]).unwrap();
    (cfg, model, x0, yd, center)
}

/// Twice the signed area the end-effector path sweeps around `c`.
fn winding(model: &ArmModel, states: &[Vec<f64>], c: [f64; 2]) -> f64 {
    let pts: Vec<Pose2> = states
        .iter()
        .map(|q| end_effector(model, q).unwrap())
        .collect();
    pts.windows(2)
        .map(|w| (w[0].px - c[0]) * (w[1].py - c[1]) - (w[0].py - c[1]) * (w[1].px - c[0]))
        .sum()
}

#[test]
fn initial_guess_selects_the_side_of_the_obstacle() {
    let (cfg, model, x0, yd, c) = crossing();
    let mut sides = Vec::new();
    for stream in [13, 23] {
        let init = random_initial_guess(&cfg, &model, &mut stream_rng(7, stream));
        let sol = solve_local(&cfg, &model, &x0, &yd, &init).unwrap();
        assert!(sol.converged);
        sides.push(winding(&model, &sol.x_pred, c));
    }
    assert!(sides[0] * sides[1] < 0.0, "{sides:?}");
}

#[test]
fn single_start_matches_local_solve() {
    let (cfg, model, x0, yd, _) = crossing();
    let ms = solve_multistart(&cfg, &model, &x0, &yd, 1, 3).unwrap();
    let init = random_initial_guess(&cfg, &model, &mut stream_rng(3, 0));
    let local = solve_local(&cfg, &model, &x0, &yd, &init).unwrap();
    assert_eq!(ms.solutions.len() + ms.failures.len(), 1);
    assert_eq!(ms.solutions[0].xi, local.xi);
    assert_eq!(ms.solutions[0].cost, local.cost);
}

#[test]
fn multistart_finds_several_modes() {
    let (cfg, model, x0, yd, _) = crossing();
    let ms = solve_multistart(&cfg, &model, &x0, &yd, 32, 7).unwrap();
    assert!(ms.solutions.windows(2).all(|w| w[0].cost <= w[1].cost));
    let converged: Vec<_> = ms.solutions.iter().filter(|s| s.converged).collect();
    for s in &converged {
        assert!(s.max_violation <= cfg.solver_tol);
        assert!(s.kkt_residual <= cfg.solver_tol);
    }
    let tau = mode_threshold(cfg.horizon, model.dof());
    let mut modes: Vec<&[f64]> = Vec::new();
    for s in &converged {
        if modes.iter().all(|m| plan_distance(m, &s.xi.u) > tau) {
            modes.push(&s.xi.u);
        }
    }
    assert!(modes.len() >= 2, "{} modes", modes.len());
}

#[test]
fn complementary_slackness_at_converged_solutions() {
    let (cfg, model, x0, yd, _) = crossing();
    let ms = solve_multistart(&cfg, &model, &x0, &yd, 8, 11).unwrap();
    let tol = cfg.solver_tol;
    let mut checked = 0;
    for s in ms.solutions.iter().filter(|s| s.converged) {
        let g = constraint_residuals(&cfg, &model, &x0, &s.xi).unwrap();
        assert_eq!(g.len(), s.multipliers.len());
        for (gj, lj) in g.iter().zip(&s.multipliers) {
            assert!(*lj >= 0.0);
            assert!((gj * lj).abs() <= 10.0 * tol, "g = {gj}, multiplier {lj}");
            if *gj < -tol.sqrt() {
                assert!(*lj <= tol, "inactive g = {gj} has multiplier {lj}");
            }
        }
        checked += 1;
    }
    assert!(checked > 0);
}

#[test]
fn solution_improves_on_a_feasible_initial_guess() {
    let model = ArmModel::desk();
    let cfg = OcpConfig::desk(3);
    let mut rng = stream_rng(17, 0);
    let mut tested = 0;
    while tested < 10 {
        let x0: Vec<f64> = (0..3).map(|_| rng.random_range(-1.5..1.5)).collect();
        let qt: Vec<f64> = (0..3).map(|_| rng.random_range(-1.5..1.5)).collect();
        let yd = end_effector(&model, &qt).unwrap();
        let mut init = random_initial_guess(&cfg, &model, &mut rng);
        init.u
            .iter_mut()
            .chain(init.u_s.iter_mut())
            .for_each(|v| *v *= 0.3);
        let g = constraint_residuals(&cfg, &model, &x0, &init).unwrap();
        if g.iter().any(|&v| v > 0.0) {
            continue;
        }
        let before = ocp_cost(&cfg, &model, &x0, &yd, &init).unwrap();
        let sol = solve_local(&cfg, &model, &x0, &yd, &init).unwrap();
        assert!(sol.cost <= before + 1e-9, "{} > {before}", sol.cost);
        tested += 1;
    }
}

#[test]
fn warm_start_keeps_the_mode() {
    let model = ArmModel::desk();
    let cfg = OcpConfig::desk(3);
    let tau = mode_threshold(cfg.horizon, model.dof());
    let mut rng = stream_rng(23, 0);
    let trials = 40;
    let mut kept = 0;
    for _ in 0..trials {
        let x0: Vec<f64> = (0..3).map(|_| rng.random_range(-1.5..1.5)).collect();
        let qt: Vec<f64> = (0..3).map(|_| rng.random_range(-1.5..1.5)).collect();
        let yd = end_effector(&model, &qt).unwrap();
        let init = random_initial_guess(&cfg, &model, &mut rng);
        let prev = solve_local(&cfg, &model, &x0, &yd, &init).unwrap();
        let again = solve_local(&cfg, &model, &x0, &yd, &warm_start_shift(&prev)).unwrap();
        if plan_distance(&again.xi.u, &prev.xi.u) < tau {
            kept += 1;
        }
    }
    assert!(kept as f64 >= 0.95 * trials as f64, "{kept}/{trials}");
}

#[test]
fn multistart_is_deterministic() {
    let (cfg, model, x0, yd, _) = crossing();
    let a = solve_multistart(&cfg, &model, &x0, &yd, 4, 5).unwrap();
    let b = solve_multistart(&cfg, &model, &x0, &yd, 4, 5).unwrap();
    assert_eq!(a.starts, b.starts);
    for (x, y) in a.solutions.iter().zip(&b.solutions) {
        assert_eq!(x.xi, y.xi);
    }
}

#[test]
fn crossing_endpoints_are_collision_free() {
    let (cfg, model, x0, _, _) = crossing();
    assert!(min_obstacle_margin(&model, &x0, &cfg.obstacles).unwrap() > 0.0);
    assert!(min_obstacle_margin(&model, &[1.2, -0.8, -0.8], &cfg.obstacles).unwrap() > 0.0);
    let zero = DecisionVector::zeros(cfg.horizon, 3);
    assert!(constraint_residuals(&cfg, &model, &x0, &zero)
        .unwrap()
        .iter()
        .all(|&g| g <= 0.0));
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn shift_stays_in_velocity_box(seed in 0u64..1000) {
            let model = ArmModel::desk();
            let cfg = OcpConfig::desk(3);
            let xi = random_initial_guess(&cfg, &model, &mut stream_rng(seed, 0));
            let s = xi.shifted();
            for (i, v) in s.u.iter().chain(&s.u_s).enumerate() {
                prop_assert!(v.abs() <= model.vel_limit()[i % 3]);
            }
        }
    }
}
