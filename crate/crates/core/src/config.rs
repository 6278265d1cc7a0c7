//! Experiment configuration: one JSON document per experiment.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::brt::{Brt, GrowthMode, GrowthOptions};
use crate::error::{Error, Result};
use crate::steering::SteeringSettings;
use crate::types::{GaussianBelief, LinearGaussianSystem, PlanningScene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub n_iter: usize,
    #[serde(default)]
    pub max_nodes: Option<usize>,
    pub radii: Vec<f64>,
    pub mode: GrowthMode,
    pub seed: u64,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueryConfig {
    /// Connection attempts per query.
    pub m: usize,
    /// Annulus over the position subspace from which coverage query means are drawn.
    pub annulus_inner: f64,
    pub annulus_outer: f64,
    /// State indices spanning the position subspace.
    pub position_dims: Vec<usize>,
    /// Intervals for the diagonal entries of coverage query covariances.
    pub intervals: Vec<[f64; 2]>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self {
            m: crate::planner::DEFAULT_M,
            annulus_inner: 10.0,
            annulus_outer: 20.0,
            position_dims: vec![0, 1],
            intervals: vec![[0.0, 0.1], [0.1, 0.2], [0.2, 0.3], [0.3, 0.4]],
            trials: 250,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub system: LinearGaussianSystem,
    pub scene: PlanningScene,
    pub goal: GaussianBelief,
    pub tree: TreeConfig,
    #[serde(default)]
    pub query: QueryConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.system.n();
        self.scene.check_dims(&self.system)?;
        if self.goal.dim() != n {
            return Err(Error::invalid(format!("goal has dim {} but n = {n}", self.goal.dim())));
        }
        if self.tree.radii.len() != n {
            return Err(Error::invalid(format!("tree.radii has length {} but n = {n}", self.tree.radii.len())));
        }
        if self.tree.horizon == 0 {
            return Err(Error::invalid("tree.horizon must be at least 1"));
        }
        let q = &self.query;
        if q.position_dims.is_empty() || q.position_dims.iter().any(|&i| i >= n) {
            return Err(Error::invalid("query.position_dims out of range"));
        }
        if !(0.0 <= q.annulus_inner && q.annulus_inner <= q.annulus_outer) {
            return Err(Error::invalid("query annulus needs 0 <= inner <= outer"));
        }
        if q.intervals.iter().any(|[lo, hi]| !(0.0 <= *lo && lo <= hi)) {
            return Err(Error::invalid("query intervals need 0 <= lo <= hi"));
        }
        Ok(())
    }

    pub fn root(&self) -> Result<Brt> {
        Brt::create_root(self.goal.clone(), self.system.clone(), self.scene.clone(), self.tree.horizon, self.tree.seed)
    }

    pub fn growth_options(&self) -> GrowthOptions {
        GrowthOptions {
            n_iter: self.tree.n_iter,
            max_nodes: self.tree.max_nodes,
            radii: DVector::from_vec(self.tree.radii.clone()),
            settings: SteeringSettings::default(),
        }
    }

    /// Coverage query: mean uniform (by area) in the position annulus
    /// (other coordinates zero), diagonal covariance with entries uniform in `interval`.
    pub fn sample_coverage_query<R: Rng + ?Sized>(&self, interval: [f64; 2], rng: &mut R) -> Result<GaussianBelief> {
        let n = self.system.n();
        let q = &self.query;
        let dims = q.position_dims.len();
        // uniform direction, radius with density ∝ r^(dims−1)
        let dir = loop {
            let g = DVector::from_fn(dims, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let norm = g.norm();
            if norm > 1e-9 && norm <= 1.0 {
                break g / norm;
            }
        };
        let (lo, hi) = (q.annulus_inner.powi(dims as i32), q.annulus_outer.powi(dims as i32));
        let r = (lo + rng.random::<f64>() * (hi - lo)).powf(1.0 / dims as f64);
        let mut mean = DVector::zeros(n);
        for (j, &i) in q.position_dims.iter().enumerate() {
            mean[i] = self.goal.mean()[i] + r * dir[j];
        }
        let diag = DVector::from_fn(n, |_, _| interval[0] + rng.random::<f64>() * (interval[1] - interval[0]));
        GaussianBelief::new(mean, nalgebra::DMatrix::from_diagonal(&diag))
    }

    pub fn mode(&self) -> GrowthMode {
        self.tree.mode
    }
}
