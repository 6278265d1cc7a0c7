#![allow(dead_code)]

use maxcovar::moments::{chance_quantile, normal_cdf};
use maxcovar::{GaussianBelief, HalfspaceChanceConstraint, LinearGaussianSystem, PlanningScene};
use nalgebra::{DMatrix, DVector};

pub fn scalar(x: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, x)
}

pub fn vec1(x: f64) -> DVector<f64> {
    DVector::from_element(1, x)
}

pub fn belief1(mean: f64, var: f64) -> GaussianBelief {
    GaussianBelief::new(vec1(mean), scalar(var)).unwrap()
}

/// ε with Φ⁻¹(1 − ε) = q.
pub fn epsilon_for_quantile(q: f64) -> f64 {
    1.0 - normal_cdf(q)
}

/// One-step scalar instance `x' = a x + u + d w` with `|u| ≤ β` chance bounds.
#[derive(Debug, Clone, Copy)]
pub struct ScalarBench {
    pub a: f64,
    pub d: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub mu_q: f64,
    pub mu_goal: f64,
    pub sigma_goal: f64,
}

impl ScalarBench {
    /// `c = β/Φ⁻¹ = 1`, `A = B = 1`, `D = 0`, target `(0, 1)`.
    pub fn unit() -> Self {
        Self { a: 1.0, d: 0.0, beta: 1.0, epsilon: epsilon_for_quantile(1.0), mu_q: 0.0, mu_goal: 0.0, sigma_goal: 1.0 }
    }

    pub fn system(&self) -> LinearGaussianSystem {
        LinearGaussianSystem::new(scalar(self.a), scalar(1.0), scalar(self.d), 1.0).unwrap()
    }

    pub fn scene(&self, y_ref: f64) -> PlanningScene {
        let cs = HalfspaceChanceConstraint::box_bounds(1, self.beta, self.epsilon).unwrap();
        PlanningScene::new(vec![], cs, scalar(1.0), scalar(y_ref)).unwrap()
    }

    pub fn target(&self) -> GaussianBelief {
        belief1(self.mu_goal, self.sigma_goal)
    }
}

/// Brute-force search over `K ∈ [−3, 0]` and `v ∈ [−β, β]` (step 1e-3) for
/// the largest `Σ_0` steerable into the spectral target in one step under
/// the exact constraints. Returns `(Σ_0, K, v)`.
pub fn grid_max_sigma0(b: &ScalarBench) -> Option<(f64, f64, f64)> {
    let step = 1e-3;
    let q = chance_quantile(b.epsilon);
    let room = b.sigma_goal - b.d * b.d;
    if room < 0.0 {
        return None;
    }
    let nv = (2.0 * b.beta / step).round() as i64;
    let mut best: Option<(f64, f64, f64)> = None;
    for iv in 0..=nv {
        let v = -b.beta + iv as f64 * step;
        // mean boundary condition μ_1 = a μ_q + v must hit the goal on the grid
        if (b.a * b.mu_q + v - b.mu_goal).abs() > 0.5 * step {
            continue;
        }
        let slack = b.beta - v.abs();
        if slack < 0.0 {
            continue;
        }
        for ik in 0..=3000 {
            let k = -3.0 + ik as f64 * step;
            let by_control = if k == 0.0 || q == 0.0 { f64::INFINITY } else { (slack / (q * k.abs())).powi(2) };
            let gain = (b.a + k).powi(2);
            let by_terminal = if gain == 0.0 { f64::INFINITY } else { room / gain };
            let s = by_control.min(by_terminal);
            if best.is_none_or(|(bs, _, _)| s > bs) {
                best = Some((s, k, v));
            }
        }
    }
    best
}

/// Exact feasibility of a scalar one-step maneuver with gain `k` from `Σ_0`.
pub fn scalar_exact_ok(b: &ScalarBench, sigma0: f64, k: f64, v: f64) -> bool {
    let q = chance_quantile(b.epsilon);
    let mean_ok = (b.a * b.mu_q + v - b.mu_goal).abs() <= 1e-6;
    let ctrl_ok = q * (k * k * sigma0).sqrt() + v.abs() <= b.beta + 1e-7;
    let term_ok = (b.a + k).powi(2) * sigma0 + b.d * b.d <= b.sigma_goal + 1e-7;
    mean_ok && ctrl_ok && term_ok
}

pub fn config_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

pub fn desk_config() -> maxcovar::config::ExperimentConfig {
    maxcovar::config::ExperimentConfig::load(&config_path("desk2d.json")).unwrap()
}

/// Desk-scene tree grown for `n_iter` iterations from the config seed.
pub fn desk_tree(mode: maxcovar::brt::GrowthMode, n_iter: usize) -> (maxcovar::brt::Brt, maxcovar::brt::GrowthReport) {
    let cfg = desk_config();
    let mut tree = cfg.root().unwrap();
    let mut opts = cfg.growth_options();
    opts.n_iter = n_iter;
    opts.max_nodes = None;
    let report = maxcovar::brt::grow(&mut tree, mode, &opts, &mut maxcovar::brt::TreeRng::new(cfg.tree.seed)).unwrap();
    (tree, report)
}
