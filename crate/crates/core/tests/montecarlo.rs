mod common;

use common::*;
use maxcovar::brt::GrowthMode;
use maxcovar::linalg::max_eigenvalue;
use maxcovar::moments::{chance_quantile, propagate};
use maxcovar::montecarlo::*;
use maxcovar::{
    AffineFeedbackLaw, FeedbackStep, GaussianBelief, HalfspaceChanceConstraint, LinearGaussianSystem, PlanningScene,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_instance(
    n: usize,
    m: usize,
    len: usize,
    seed: u64,
) -> (LinearGaussianSystem, GaussianBelief, AffineFeedbackLaw) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mat = |r: usize, c: usize, s: f64| DMatrix::from_fn(r, c, |_, _| s * (rng.random::<f64>() * 2.0 - 1.0));
    let a = DMatrix::identity(n, n) + mat(n, n, 0.2);
    let b = mat(n, m, 1.0);
    let d = mat(n, n, 0.3);
    let steps = (0..len)
        .map(|_| FeedbackStep { k: mat(m, n, 0.3), v: DVector::from_column_slice(mat(m, 1, 1.0).as_slice()) })
        .collect();
    let l = mat(n, n, 1.0);
    let mean = DVector::from_column_slice(mat(n, 1, 2.0).as_slice());
    let cov = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
    (
        LinearGaussianSystem::new(a, b, d, 0.1).unwrap(),
        GaussianBelief::new(mean, cov).unwrap(),
        AffineFeedbackLaw::new(steps).unwrap(),
    )
}

#[test]
fn deterministic_limit() {
    let (sys, init, law) = random_instance(3, 2, 5, 1);
    let sys = LinearGaussianSystem::new(sys.a().clone(), sys.b().clone(), DMatrix::zeros(3, 3), 0.1).unwrap();
    let init = GaussianBelief::new(init.mean().clone(), DMatrix::zeros(3, 3)).unwrap();
    let nominal = propagate(&sys, &init, &law).unwrap();
    let s = rollout(&sys, &init, &law, 50, 3).unwrap();
    for k in 0..=law.len() {
        for col in s.states[k].column_iter() {
            assert!((col - &nominal.means[k]).amax() < 1e-12);
        }
    }
    for k in 0..law.len() {
        for col in s.controls[k].column_iter() {
            assert!((col - &law.steps()[k].v).amax() < 1e-12);
        }
    }
}

#[test]
fn zero_trials() {
    let (sys, init, law) = random_instance(2, 1, 3, 2);
    let s = rollout(&sys, &init, &law, 0, 0).unwrap();
    assert_eq!(s.trials, 0);
    assert_eq!(s.states.len(), 4);
    assert!(s.states.iter().all(|x| x.ncols() == 0));
    let c = HalfspaceChanceConstraint::new(DVector::from_vec(vec![1.0, 0.0]), 0.0, 0.1).unwrap();
    assert_eq!(empirical_violation_rate(&s, &c, Signal::State, 0).unwrap(), 0.0);
}

#[test]
fn moments_match_propagation() {
    let trials = 100_000;
    for seed in 0..3 {
        let (sys, init, law) = random_instance(3, 2, 6, 10 + seed);
        let traj = propagate(&sys, &init, &law).unwrap();
        let s = rollout(&sys, &init, &law, trials, seed).unwrap();
        for k in 0..=law.len() {
            let lmax = max_eigenvalue(&traj.covariances[k]).unwrap();
            let mean_err = (s.mean(Signal::State, k) - &traj.means[k]).norm();
            assert!(mean_err <= 4.0 * (lmax / trials as f64).sqrt(), "seed {seed}, k {k}: {mean_err}");
            let cov_err = (s.covariance(Signal::State, k) - &traj.covariances[k]).norm() / traj.covariances[k].norm();
            assert!(cov_err <= 0.05, "seed {seed}, k {k}: {cov_err}");
        }
    }
}

#[test]
fn boundary_constraint_rate_is_epsilon() {
    let (sys, init, law) = random_instance(3, 2, 4, 20);
    let traj = propagate(&sys, &init, &law).unwrap();
    let trials = 40_000;
    let s = rollout(&sys, &init, &law, trials, 7).unwrap();
    let alpha = DVector::from_vec(vec![0.6, -0.8, 0.0]);
    for eps in [0.01, 0.05, 0.2] {
        for k in [0, 2, 4] {
            let sd = (alpha.transpose() * &traj.covariances[k] * &alpha)[(0, 0)].sqrt();
            let beta = alpha.dot(&traj.means[k]) + chance_quantile(eps) * sd;
            let c = HalfspaceChanceConstraint::new(alpha.clone(), beta, eps).unwrap();
            let rate = empirical_violation_rate(&s, &c, Signal::State, k).unwrap();
            let tol = 3.0 * (eps * (1.0 - eps) / trials as f64).sqrt();
            assert!((rate - eps).abs() <= tol, "ε {eps}, k {k}: {rate}");
        }
    }
    let never = HalfspaceChanceConstraint::new(alpha, 1e9, 0.05).unwrap();
    assert_eq!(empirical_violation_rate(&s, &never, Signal::State, 1).unwrap(), 0.0);
    let wrong = HalfspaceChanceConstraint::new(vec1(1.0), 0.0, 0.05).unwrap();
    assert!(empirical_violation_rate(&s, &wrong, Signal::State, 1).is_err());
}

#[test]
fn violation_bound_formula() {
    assert_eq!(violation_bound(0.05, 10_000), 0.05 + 3.0 * (0.05f64 * 0.95 / 10_000.0).sqrt());
    assert_eq!(violation_bound(0.0, 100), 0.0);
}

#[test]
fn gaussian_closure() {
    let (sys, init, law) = random_instance(3, 2, 5, 30);
    let s = rollout(&sys, &init, &law, 100_000, 1).unwrap();
    let alpha = DVector::from_vec(vec![1.0, 0.5, -0.3]);
    for k in 0..=law.len() {
        assert!(s.skewness(Signal::State, &alpha, k).abs() < 0.05);
    }
    let beta = DVector::from_vec(vec![1.0, -1.0]);
    for k in 0..law.len() {
        assert!(s.skewness(Signal::Control, &beta, k).abs() < 0.05);
    }
}

#[test]
fn seeded_determinism() {
    let (sys, init, law) = random_instance(2, 2, 3, 40);
    let a = rollout(&sys, &init, &law, 3000, 5).unwrap();
    let b = rollout(&sys, &init, &law, 3000, 5).unwrap();
    let c = rollout(&sys, &init, &law, 3000, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    // whole chunks of 1024 trials are shared between runs of different size
    let short = rollout(&sys, &init, &law, 1024, 5).unwrap();
    assert_eq!(short.states[3], a.states[3].columns(0, 1024));
}

#[test]
fn semidefinite_initial_covariance() {
    let (sys, _, law) = random_instance(2, 2, 3, 50);
    let v = DVector::from_vec(vec![1.0, 2.0]);
    let init = GaussianBelief::new(DVector::zeros(2), &v * v.transpose()).unwrap();
    let s = rollout(&sys, &init, &law, 20_000, 1).unwrap();
    let emp = s.covariance(Signal::State, 0);
    assert!((emp - &v * v.transpose()).norm() / 5.0 < 0.05);
    assert!(
        GaussianBelief::new(DVector::zeros(2), DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]))).is_err()
    );
}

#[test]
fn verified_edges_respect_chance_constraints() {
    let (tree, _) = desk_tree(GrowthMode::Maxcovar, 12);
    let trials = 10_000;
    for node in tree.nodes().iter().skip(1).take(4) {
        let s =
            rollout(tree.system(), &node.belief().unwrap(), node.edge_law.as_ref().unwrap(), trials, node.id as u64)
                .unwrap();
        let (rate, bound) = worst_violation(&s, tree.scene()).unwrap().unwrap();
        assert!(rate <= bound, "node {}: {rate} > {bound}", node.id);
    }
}

#[test]
fn csv_summary() {
    let (sys, init, law) = random_instance(2, 1, 3, 60);
    let scene = PlanningScene::new(
        vec![HalfspaceChanceConstraint::new(DVector::from_vec(vec![1.0, 0.0]), 5.0, 0.05).unwrap()],
        HalfspaceChanceConstraint::box_bounds(1, 2.0, 0.05).unwrap(),
        DMatrix::identity(2, 2),
        DMatrix::identity(1, 1),
    )
    .unwrap();
    let s = rollout(&sys, &init, &law, 500, 1).unwrap();
    let text = summary_csv(&s, &scene).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,mean_0,mean_1,cov_fro,state_viol_0,control_viol_0,control_viol_1");
    assert_eq!(lines.len(), 1 + 4);
    assert!(lines[4].ends_with(",,"));
    let first: Vec<f64> = lines[1].split(',').take(3).map(|x| x.parse().unwrap()).collect();
    assert_eq!(first[0], 0.0);
    assert_eq!(first[1], s.mean(Signal::State, 0)[0]);
}
