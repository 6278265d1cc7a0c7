mod common;

use common::*;
use maxcovar::conic::{ConicSolution, SolveStatus};
use maxcovar::moments::{self, chance_quantile};
use maxcovar::steering::{linearize_control_chance, linearize_state_chance, Steerer, SteeringSettings};
use maxcovar::{
    Error, GaussianBelief, HalfspaceChanceConstraint, LinearGaussianSystem, PlanningScene, SteeringWeights,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn identity_system(n: usize, noise: f64) -> LinearGaussianSystem {
    LinearGaussianSystem::new(DMatrix::identity(n, n), DMatrix::identity(n, n), DMatrix::identity(n, n) * noise, 1.0)
        .unwrap()
}

fn steerer(system: LinearGaussianSystem, scene: PlanningScene) -> Steerer {
    Steerer::new(system, scene, SteeringSettings::default()).unwrap()
}

#[test]
fn linearized_state_example() {
    let c = HalfspaceChanceConstraint::new(vec1(1.0), 3.0, epsilon_for_quantile(1.0)).unwrap();
    let lin = linearize_state_chance(&c, &scalar(1.0)).unwrap();
    assert!((lin.coef - 0.5).abs() < 1e-9);
    assert!((lin.rhs - 2.5).abs() < 1e-9);
    assert_eq!(lin.alpha, vec1(1.0));
}

#[test]
fn linearized_control_example() {
    let c = HalfspaceChanceConstraint::new(vec1(1.0), 2.0, epsilon_for_quantile(1.0)).unwrap();
    let lin = linearize_control_chance(&c, &scalar(1.0)).unwrap();
    assert!((lin.coef - 0.5).abs() < 1e-9);
    assert!((lin.rhs - 1.5).abs() < 1e-9);
}

#[test]
fn linearization_rejects_degenerate_reference() {
    let c = HalfspaceChanceConstraint::new(DVector::from_vec(vec![1.0, 0.0]), 1.0, 0.1).unwrap();
    let r = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 1.0]));
    assert!(matches!(linearize_state_chance(&c, &r), Err(Error::InvalidArgument(_))));
    let hard = HalfspaceChanceConstraint::new(vec1(1.0), 1.0, 0.0).unwrap();
    assert!(linearize_control_chance(&hard, &scalar(1.0)).is_err());
}

fn random_psd(n: usize, seed: &[f64]) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |i, j| seed[(i * n + j) % seed.len()]);
    &g * g.transpose() + DMatrix::identity(n, n) * 1e-3
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn tangent_overestimates_exact(
        entries in prop::collection::vec(-2.0f64..2.0, 9),
        refs in prop::collection::vec(-2.0f64..2.0, 9),
        alpha in prop::collection::vec(-1.0f64..1.0, 3),
        mu in prop::collection::vec(-3.0f64..3.0, 3),
        eps in 0.01f64..0.5,
    ) {
        let alpha = DVector::from_vec(alpha);
        prop_assume!(alpha.amax() > 1e-3);
        let c = HalfspaceChanceConstraint::new(alpha, 1.0, eps).unwrap();
        let sigma = random_psd(3, &entries);
        let sref = random_psd(3, &refs);
        let mu = DVector::from_vec(mu);
        let exact = moments::state_chance_margin(&mu, &sigma, &c).unwrap();
        let lin = linearize_state_chance(&c, &sref).unwrap();
        prop_assert!(lin.lhs(&sigma, &mu) >= exact - 1e-12);
        let ylin = linearize_control_chance(&c, &sref).unwrap();
        prop_assert!(ylin.lhs(&sigma, &mu) >= exact - 1e-12);
        let at_ref = lin.lhs(&sref, &mu);
        let exact_ref = moments::state_chance_margin(&mu, &sref, &c).unwrap();
        prop_assert!((at_ref - exact_ref).abs() <= 1e-9 * (1.0 + exact_ref.abs()));
    }
}

#[test]
fn staying_put_costs_nothing() {
    let s = steerer(identity_system(2, 0.0), PlanningScene::unconstrained(2, 2));
    let init = GaussianBelief::new(DVector::zeros(2), DMatrix::identity(2, 2) * 0.5).unwrap();
    let goal = GaussianBelief::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
    let w = SteeringWeights::control_effort(2, 2, 1);
    let sol = s.opt_steer(&init, &goal, 1, &w, false).unwrap();
    assert_eq!(sol.status, SolveStatus::Optimal);
    assert!(sol.objective_value.abs() < 1e-6, "objective {}", sol.objective_value);
    assert!(sol.law.steps()[0].v.amax() < 1e-6);
    assert!(sol.aux_y[0].amax() < 1e-6);
    assert!(sol.replay.pass);
}

#[test]
fn mean_only_steering() {
    let s = steerer(identity_system(1, 0.0), PlanningScene::unconstrained(1, 1));
    let w = SteeringWeights::control_effort(1, 1, 1);
    let sol = s.opt_steer(&belief1(0.0, 1e-4), &belief1(1.0, 1e-4), 1, &w, false).unwrap();
    assert!((sol.law.steps()[0].v[0] - 1.0).abs() < 1e-6);
    assert!((sol.trajectory.final_mean()[0] - 1.0).abs() < 1e-6);
}

#[test]
fn solution_lmi_and_replay_invariants() {
    let system = LinearGaussianSystem::integrator_chain(2, 1, 0.5, 0.1).unwrap();
    let cs = HalfspaceChanceConstraint::box_bounds(1, 3.0, 0.05).unwrap();
    let scene = PlanningScene::new(vec![], cs, DMatrix::identity(2, 2), scalar(1.0)).unwrap();
    let s = steerer(system, scene);
    let init = GaussianBelief::new(DVector::from_vec(vec![2.0, 0.0]), DMatrix::identity(2, 2) * 0.3).unwrap();
    let goal = GaussianBelief::new(DVector::zeros(2), DMatrix::identity(2, 2) * 0.5).unwrap();
    let sol = s.opt_steer(&init, &goal, 6, &SteeringWeights::control_effort(2, 1, 6), true).unwrap();
    assert_eq!(sol.status, SolveStatus::Optimal);
    for k in 0..6 {
        let sig = &sol.trajectory.covariances[k];
        let u = &sol.aux_u[k];
        let y = &sol.aux_y[k];
        let mut big = DMatrix::zeros(3, 3);
        big.view_mut((0, 0), (2, 2)).copy_from(sig);
        big.view_mut((2, 0), (1, 2)).copy_from(u);
        big.view_mut((0, 2), (2, 1)).copy_from(&u.transpose());
        big.view_mut((2, 2), (1, 1)).copy_from(y);
        assert!(maxcovar::linalg::min_eigenvalue(&big).unwrap() >= -1e-7);
    }
    assert!(sol.replay_deviation <= 1e-5, "deviation {}", sol.replay_deviation);
    let json = serde_json::to_string(&sol).unwrap();
    assert!(json.contains("\"law\""));
}

fn synthetic_solution(u: f64, y: f64, sigma1: f64) -> ConicSolution {
    let values = [("U_0", u), ("Y_0", y), ("v_0", 0.0), ("Sigma_1", sigma1), ("mu_1", 0.0)]
        .into_iter()
        .map(|(k, x)| (k.to_string(), vec![x]))
        .collect();
    ConicSolution { status: SolveStatus::Optimal, values, objective_value: 0.0, stats: Default::default() }
}

#[test]
fn recovery_examples() {
    let s = steerer(identity_system(1, 0.0), PlanningScene::unconstrained(1, 1));
    let sp =
        s.build_opt_steer(&belief1(0.0, 1.0), &belief1(0.0, 1.0), 1, &SteeringWeights::zero(1, 1, 1), false).unwrap();
    let rec = s.recover_controller(&synthetic_solution(0.0, 0.0, 1.0), &sp).unwrap();
    assert_eq!(rec.law.steps()[0].k[(0, 0)], 0.0);
    let rec = s.recover_controller(&synthetic_solution(-0.5, 0.25, 0.25), &sp).unwrap();
    assert!((rec.law.steps()[0].k[(0, 0)] + 0.5).abs() < 1e-15);
    let mut failed = synthetic_solution(0.0, 0.0, 1.0);
    failed.status = SolveStatus::Infeasible;
    assert!(matches!(s.recover_controller(&failed, &sp), Err(Error::NotSolved(SolveStatus::Infeasible))));

    // end to end: Σ_0 = 1 into Σ_1 ≤ 0.25 (tightened by the terminal backoff)
    // at minimum effort forces (1 + K)² = 0.25 (1 − b)
    let w = SteeringWeights::control_effort(1, 1, 1);
    let sol = s.opt_steer(&belief1(0.0, 1.0), &belief1(0.0, 0.25), 1, &w, false).unwrap();
    let expected = (0.25 * (1.0 - s.settings().terminal_backoff)).sqrt() - 1.0;
    assert!((sol.law.steps()[0].k[(0, 0)] - expected).abs() < 1e-6);
    let sol = s.opt_steer(&belief1(0.0, 0.5), &belief1(0.0, 1.0), 1, &w, false).unwrap();
    assert!(sol.law.steps()[0].k[(0, 0)].abs() < 1e-4);
}

#[test]
fn recovery_rejects_gain_outside_range() {
    let s = steerer(identity_system(2, 0.0), PlanningScene::unconstrained(2, 2));
    let init =
        GaussianBelief::new(DVector::zeros(2), DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]))).unwrap();
    let goal = GaussianBelief::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
    let sp = s.build_opt_steer(&init, &goal, 1, &SteeringWeights::zero(2, 2, 1), false).unwrap();
    let mut values = std::collections::BTreeMap::new();
    // U with a nonzero column on the null direction of Σ_0
    values.insert("U_0".to_string(), vec![0.0, 1.0, 1.0, 0.0]);
    values.insert("Y_0".to_string(), vec![1.0, 0.0, 1.0]);
    values.insert("v_0".to_string(), vec![0.0, 0.0]);
    values.insert("Sigma_1".to_string(), vec![1.0, 0.0, 1.0]);
    values.insert("mu_1".to_string(), vec![0.0, 0.0]);
    let sol = ConicSolution { status: SolveStatus::Optimal, values, objective_value: 0.0, stats: Default::default() };
    assert!(matches!(s.recover_controller(&sol, &sp), Err(Error::RecoveryFailed { step: 0, .. })));
}

#[test]
fn singular_initial_covariance_uses_pseudo_inverse() {
    let s = steerer(identity_system(2, 0.0), PlanningScene::unconstrained(2, 2));
    let init =
        GaussianBelief::new(DVector::zeros(2), DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]))).unwrap();
    let goal = GaussianBelief::new(DVector::zeros(2), DMatrix::identity(2, 2) * 0.25).unwrap();
    let sol = s.opt_steer(&init, &goal, 1, &SteeringWeights::control_effort(2, 2, 1), true).unwrap();
    assert_eq!(sol.pseudo_inverse_steps, vec![0]);
    assert!(sol.replay.pass);
}

#[test]
fn max_covar_scalar_benchmark_matches_closed_form_and_grid() {
    let b = ScalarBench::unit();
    let (grid, k_star, _) = grid_max_sigma0(&b).unwrap();
    let c = b.beta / chance_quantile(b.epsilon);
    assert!((c - 1.0).abs() < 1e-9);
    assert!((grid - (1.0 + c).powi(2)).abs() < 1e-9);
    assert!((k_star + c / (1.0 + c)).abs() < 1e-9);

    let s = steerer(b.system(), b.scene(1.0));
    let mc = s.max_covar(&vec1(b.mu_q), &b.target(), 1).unwrap();
    assert_eq!(mc.status, SolveStatus::Optimal);
    let lam = mc.sigma_max[(0, 0)];
    assert!((lam - 4.0).abs() <= 1e-3, "λ_min(Σ_max) = {lam}");
    assert!((mc.law.steps()[0].k[(0, 0)] + 0.5).abs() < 1e-3);
    assert!(scalar_exact_ok(&b, lam, mc.law.steps()[0].k[(0, 0)], mc.law.steps()[0].v[0]));
}

#[test]
fn max_covar_is_maximal() {
    let b = ScalarBench::unit();
    let s = steerer(b.system(), b.scene(1.0));
    let lam = s.max_covar(&vec1(0.0), &b.target(), 1).unwrap().sigma_max[(0, 0)];
    assert!(!s.feasible(&belief1(0.0, 1.05 * lam), &b.target(), 1));
    assert!(s.feasible(&belief1(0.0, 0.95 * lam), &b.target(), 1));
}

/// Scalar family with the reference placed at the oracle's optimal `Y`, so
/// the tangent is exact at the optimum and the programs must agree.
#[test]
fn scalar_family_matches_grid_oracle() {
    let family = [
        ScalarBench { a: 1.0, d: 0.3, beta: 2.0, epsilon: 0.05, mu_q: 0.5, mu_goal: 0.0, sigma_goal: 1.0 },
        ScalarBench { a: 0.8, d: 0.0, beta: 1.5, epsilon: 0.1, mu_q: -1.0, mu_goal: 0.0, sigma_goal: 0.5 },
        ScalarBench { a: 1.2, d: 0.2, beta: 3.0, epsilon: 0.02, mu_q: 1.0, mu_goal: 0.2, sigma_goal: 2.0 },
    ];
    for b in family {
        let (grid, k, _) = grid_max_sigma0(&b).unwrap();
        let y_opt = k * k * grid;
        let s = steerer(b.system(), b.scene(y_opt));
        let mc = s.max_covar(&vec1(b.mu_q), &b.target(), 1).unwrap();
        let lam = mc.sigma_max[(0, 0)];
        assert!((lam - grid).abs() <= 1e-2 * grid, "{b:?}: sdp {lam} grid {grid}");
        assert!(scalar_exact_ok(&b, lam, mc.law.steps()[0].k[(0, 0)], mc.law.steps()[0].v[0]));
        // feasibility boundary
        assert!(s.feasible(&belief1(b.mu_q, 0.97 * grid), &b.target(), 1), "{b:?}");
        assert!(!s.feasible(&belief1(b.mu_q, 1.03 * grid), &b.target(), 1), "{b:?}");
    }
}

#[test]
fn max_covar_unbounded_without_control_limits() {
    let s = steerer(identity_system(1, 0.0), PlanningScene::unconstrained(1, 1));
    match s.max_covar(&vec1(0.0), &belief1(0.0, 1.0), 1) {
        Err(Error::NotSolved(SolveStatus::Unbounded)) => {}
        other => panic!("expected unbounded, got {other:?}"),
    }
}

#[test]
fn max_covar_infeasible_beyond_mean_reach() {
    // The tangent at Y_r bounds |v_k| by β̄ = β_u − Φ⁻¹·√Y_r/2 = 0.995, so the
    // two-step mean reach is 1.99.
    let b = ScalarBench::unit();
    let s = steerer(b.system(), b.scene(1e-4));
    let inside = s.max_covar(&vec1(1.9), &b.target(), 2).unwrap();
    assert!(inside.sigma_max[(0, 0)] > 0.0);
    match s.max_covar(&vec1(2.1), &b.target(), 2) {
        Err(Error::NotSolved(SolveStatus::Infeasible)) => {}
        other => panic!("expected infeasible, got {other:?}"),
    }
}

#[test]
fn feasible_examples() {
    let s = steerer(identity_system(2, 0.0), PlanningScene::unconstrained(2, 2));
    let sig = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]) * 0.5;
    let q = GaussianBelief::new(DVector::zeros(2), sig).unwrap();
    for l in 1..=3 {
        assert!(s.feasible(&q, &q, l));
    }
    let b = ScalarBench { a: 1.0, d: 0.0, beta: 1.0, epsilon: 0.5, mu_q: 0.0, mu_goal: 5.0, sigma_goal: 1.0 };
    let s = steerer(b.system(), b.scene(1.0));
    assert!(!s.feasible(&belief1(0.0, 0.1), &belief1(5.0, 1.0), 1));
}

#[test]
fn reuse_from_smaller_covariance() {
    let system = LinearGaussianSystem::integrator_chain(2, 1, 0.5, 0.05).unwrap();
    let cs = HalfspaceChanceConstraint::box_bounds(1, 2.0, 0.05).unwrap();
    let scene = PlanningScene::new(vec![], cs, DMatrix::identity(2, 2), scalar(0.5)).unwrap();
    let s = steerer(system.clone(), scene.clone());
    let target = GaussianBelief::new(DVector::zeros(2), DMatrix::identity(2, 2) * 0.5).unwrap();
    let mu_q = DVector::from_vec(vec![1.5, -0.3]);
    let mc = s.max_covar(&mu_q, &target, 5).unwrap();
    for f in [0.1, 0.5, 0.9] {
        let q = GaussianBelief::new(mu_q.clone(), &mc.sigma_max * f).unwrap();
        let rep = moments::check_maneuver(&system, &q, &mc.law, &scene, &target, true).unwrap();
        assert!(rep.pass, "scale {f}: {rep:?}");
    }
    let lam = maxcovar::linalg::min_eigenvalue(&mc.sigma_max).unwrap();
    let up = GaussianBelief::new(mu_q.clone(), DMatrix::identity(2, 2) * 1.05 * lam).unwrap();
    assert!(!s.feasible(&up, &target, 5));
    let down = GaussianBelief::new(mu_q, &mc.sigma_max * 0.95).unwrap();
    assert!(s.feasible(&down, &target, 5));
}

#[test]
fn hold_case_horizon_invariance() {
    // A = I, D = 0 admits a zero-cost hold, so an L-step maneuver extends to L+1.
    let system = identity_system(2, 0.0);
    let cs = HalfspaceChanceConstraint::box_bounds(2, 1.0, 0.1).unwrap();
    let scene = PlanningScene::new(vec![], cs, DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 0.2).unwrap();
    let s = steerer(system, scene);
    let goal = GaussianBelief::new(DVector::zeros(2), DMatrix::identity(2, 2) * 0.2).unwrap();
    for (mx, var) in [(0.5, 0.05), (1.2, 0.1), (3.0, 0.05), (0.3, 0.6)] {
        let q = GaussianBelief::new(DVector::from_vec(vec![mx, -mx / 2.0]), DMatrix::identity(2, 2) * var).unwrap();
        for l in 1..4 {
            if s.feasible(&q, &goal, l) {
                assert!(s.feasible(&q, &goal, l + 1), "hold extension failed for {mx}, {var}, L = {l}");
            }
        }
    }
}

#[test]
fn rejects_bad_inputs() {
    let s = steerer(identity_system(2, 0.0), PlanningScene::unconstrained(2, 2));
    let b = GaussianBelief::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
    assert!(s.build_opt_steer(&b, &b, 0, &SteeringWeights::zero(2, 2, 0), true).is_err());
    assert!(s.build_opt_steer(&b, &b, 2, &SteeringWeights::zero(2, 2, 3), true).is_err());
    assert!(s.build_opt_steer(&belief1(0.0, 1.0), &b, 1, &SteeringWeights::zero(2, 2, 1), true).is_err());
    assert!(s.build_max_covar(&vec1(0.0), &b, 1).is_err());
}

#[test]
fn program_dump_writes_json() {
    let dir = std::env::temp_dir().join(format!("maxcovar-dump-{}", std::process::id()));
    let settings = SteeringSettings { dump_dir: Some(dir.clone()), ..Default::default() };
    let s = Steerer::new(identity_system(1, 0.0), PlanningScene::unconstrained(1, 1), settings).unwrap();
    assert!(s.feasible(&belief1(0.0, 0.1), &belief1(0.0, 0.2), 1));
    let files: Vec<_> = std::fs::read_dir(&dir).unwrap().collect();
    assert!(!files.is_empty());
    let text = std::fs::read_to_string(files[0].as_ref().unwrap().path()).unwrap();
    assert!(maxcovar::conic::ConicProgram::from_json(&text).is_ok());
    std::fs::remove_dir_all(dir).ok();
}
