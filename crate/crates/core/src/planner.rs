//! Query-time planning against a backward reachable tree.

use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::brt::Brt;
use crate::error::{Error, Result};
use crate::steering::{Steerer, SteeringSettings, SteeringSolution};
use crate::types::{AffineFeedbackLaw, GaussianBelief, SteeringWeights};

pub const DEFAULT_M: usize = 10;

/// Node ids sorted by distance of their means to `mu_q` (ties by id), at most `m`.
pub fn nearest_nodes(tree: &Brt, mu_q: &DVector<f64>, m: usize) -> Vec<usize> {
    let mut ids: Vec<(f64, usize)> = tree.nodes().iter().map(|n| ((&n.mean - mu_q).norm_squared(), n.id)).collect();
    ids.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    ids.into_iter().take(m).map(|(_, id)| id).collect()
}

/// Runs `a` then `b`.
pub fn concat(a: &AffineFeedbackLaw, b: &AffineFeedbackLaw) -> Result<AffineFeedbackLaw> {
    AffineFeedbackLaw::new(a.steps().iter().chain(b.steps()).cloned().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub found: bool,
    pub connect_law: Option<AffineFeedbackLaw>,
    /// Connection node first, root last.
    pub node_path: Vec<usize>,
    pub full_law: Option<AffineFeedbackLaw>,
    pub hops: usize,
    pub attempts: usize,
    /// Seconds spent in the planner call.
    pub wall_time: f64,
}

impl QueryResult {
    /// Equality ignoring `wall_time`.
    pub fn same_plan(&self, other: &Self) -> bool {
        Self { wall_time: 0.0, ..self.clone() } == Self { wall_time: 0.0, ..other.clone() }
    }
}

#[derive(Debug, Clone)]
pub struct QueryOptions {
    pub m: usize,
    /// Defaults to `Q = 0`, `R = I` over the tree horizon.
    pub weights: Option<SteeringWeights>,
    pub settings: SteeringSettings,
}

impl Default for QueryOptions {
    fn default() -> Self {
        Self { m: DEFAULT_M, weights: None, settings: SteeringSettings::default() }
    }
}

/// Tries single-hop connections to the `m` nearest nodes in order; on the
/// first success follows parent pointers to the root.
pub fn query(tree: &Brt, q: &GaussianBelief, opts: &QueryOptions) -> Result<QueryResult> {
    if q.dim() != tree.system().n() {
        return Err(Error::invalid("query dimension does not match the tree"));
    }
    let steerer = tree.steerer(opts.settings.clone())?;
    let weights = opts
        .weights
        .clone()
        .unwrap_or_else(|| SteeringWeights::control_effort(tree.system().n(), tree.system().m(), tree.horizon()));
    let start = Instant::now();
    let candidates = nearest_nodes(tree, q.mean(), opts.m);
    let mut attempts = 0;
    for id in candidates {
        attempts += 1;
        let target = tree.nodes()[id].belief()?;
        match steerer.opt_steer(q, &target, tree.horizon(), &weights, true) {
            Ok(sol) => {
                let node_path = tree.path_to_root(id);
                let mut full = sol.law.clone();
                for &n in &node_path[..node_path.len() - 1] {
                    let edge = tree.nodes()[n].edge_law.as_ref().expect("non-root nodes carry an edge law");
                    full = concat(&full, edge)?;
                }
                return Ok(QueryResult {
                    found: true,
                    connect_law: Some(sol.law),
                    hops: node_path.len(),
                    node_path,
                    full_law: Some(full),
                    attempts,
                    wall_time: start.elapsed().as_secs_f64(),
                });
            }
            Err(e) => log::debug!("connection to node {id} failed: {e}"),
        }
    }
    Ok(QueryResult {
        found: false,
        connect_law: None,
        node_path: Vec::new(),
        full_law: None,
        hops: 0,
        attempts,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// A single OPT-STEER solve over `steps` straight to the tree goal, timed.
pub fn monolithic_steer(
    tree: &Brt,
    q: &GaussianBelief,
    steps: usize,
    settings: &SteeringSettings,
) -> (Result<SteeringSolution>, f64) {
    let start = Instant::now();
    let out = tree.steerer(settings.clone()).and_then(|s| {
        let w = SteeringWeights::control_effort(tree.system().n(), tree.system().m(), steps);
        s.opt_steer(q, &tree.goal(), steps, &w, true)
    });
    (out, start.elapsed().as_secs_f64())
}

/// Membership of `q` in the `h`-hop backward reachable set of `node`.
pub fn brs_member(steerer: &Steerer, q: &GaussianBelief, node: &GaussianBelief, h: usize, horizon: usize) -> bool {
    h > 0 && steerer.feasible(q, node, h * horizon)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BrsMembership {
    pub member: bool,
    /// Nodes `i` with `q` in the `(h − d_i)`-BRS of `i`, nearest first.
    pub witnesses: Vec<usize>,
    pub evaluated: usize,
}

/// Membership in the union over nodes of their `(h − d_i)`-hop reachable
/// sets, evaluated nearest-first. Stops at the first witness unless
/// `exhaustive`.
pub fn tree_brs_member(
    tree: &Brt,
    q: &GaussianBelief,
    h: usize,
    settings: &SteeringSettings,
    exhaustive: bool,
) -> Result<BrsMembership> {
    let steerer = tree.steerer(settings.clone())?;
    let mut out = BrsMembership { member: false, witnesses: Vec::new(), evaluated: 0 };
    for id in nearest_nodes(tree, q.mean(), tree.len()) {
        let node = &tree.nodes()[id];
        if node.depth >= h {
            continue;
        }
        out.evaluated += 1;
        if brs_member(&steerer, q, &node.belief()?, h - node.depth, tree.horizon()) {
            out.member = true;
            out.witnesses.push(id);
            if !exhaustive {
                break;
            }
        }
    }
    Ok(out)
}
