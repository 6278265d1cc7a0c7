//! Backward reachable trees of Gaussian beliefs rooted at a goal.
//!
//! Every non-root node stores an `N`-step affine feedback law that steers its
//! belief into its parent's spectral terminal set, so laws along any
//! root-ward path can be concatenated.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::moments::{self, ManeuverReport};
use crate::serde_mat;
use crate::steering::{Steerer, SteeringSettings};
use crate::types::{AffineFeedbackLaw, GaussianBelief, LinearGaussianSystem, PlanningScene, SteeringWeights};

pub const TREE_FORMAT_VERSION: u32 = 1;

const SELECTION_STREAM: u64 = 1;
const MEAN_STREAM: u64 = 2;
const COVARIANCE_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct BrtNode {
    pub id: usize,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub parent: Option<usize>,
    pub edge_law: Option<AffineFeedbackLaw>,
    pub children: Vec<usize>,
    pub depth: usize,
}

impl BrtNode {
    pub fn belief(&self) -> Result<GaussianBelief> {
        GaussianBelief::new(self.mean.clone(), self.covariance.clone())
    }
}

/// Independent random streams for node selection, mean sampling and
/// covariance sampling, all derived from one seed.
#[derive(Debug, Clone)]
pub struct TreeRng {
    pub selection: ChaCha8Rng,
    pub mean: ChaCha8Rng,
    pub covariance: ChaCha8Rng,
}

impl TreeRng {
    pub fn new(seed: u64) -> Self {
        let stream = |s| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        Self { selection: stream(SELECTION_STREAM), mean: stream(MEAN_STREAM), covariance: stream(COVARIANCE_STREAM) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthMode {
    Maxcovar,
    Randcovar,
}

impl std::str::FromStr for GrowthMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maxcovar" => Ok(Self::Maxcovar),
            "randcovar" => Ok(Self::Randcovar),
            other => Err(Error::invalid(format!("unknown growth mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for GrowthMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Maxcovar => "maxcovar",
            Self::Randcovar => "randcovar",
        })
    }
}

/// Outcome of one growth iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub selected: usize,
    #[serde(with = "serde_mat::vector")]
    pub mu_q: DVector<f64>,
    /// Id of the inserted node, if any.
    pub accepted: Option<usize>,
    /// `λ_min(Σ_max)` at the site when the maximal-covariance solve succeeded.
    pub lambda_max_covar: Option<f64>,
    /// `λ_min` of the inserted covariance.
    pub lambda_node: Option<f64>,
    pub reject_reason: Option<String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GrowthReport {
    pub iterations: Vec<IterationRecord>,
}

impl GrowthReport {
    pub fn accepted(&self) -> usize {
        self.iterations.iter().filter(|r| r.accepted.is_some()).count()
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.iterations.is_empty() {
            0.0
        } else {
            self.accepted() as f64 / self.iterations.len() as f64
        }
    }
}

/// An edge that failed the replay audit.
#[derive(Debug, Clone)]
pub struct AuditFailure {
    pub node: usize,
    pub parent: usize,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Brt {
    system: LinearGaussianSystem,
    scene: PlanningScene,
    horizon: usize,
    seed: u64,
    nodes: Vec<BrtNode>,
}

impl Brt {
    /// Single-node tree holding `goal` as the root (id 0).
    pub fn create_root(
        goal: GaussianBelief,
        system: LinearGaussianSystem,
        scene: PlanningScene,
        horizon: usize,
        seed: u64,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::invalid("horizon must be at least 1"));
        }
        scene.check_dims(&system)?;
        if goal.dim() != system.n() {
            return Err(Error::invalid("goal dimension does not match the system"));
        }
        let root = BrtNode {
            id: 0,
            mean: goal.mean().clone(),
            covariance: goal.covariance().clone(),
            parent: None,
            edge_law: None,
            children: Vec::new(),
            depth: 0,
        };
        Ok(Self { system, scene, horizon, seed, nodes: vec![root] })
    }

    pub fn system(&self) -> &LinearGaussianSystem {
        &self.system
    }
    pub fn scene(&self) -> &PlanningScene {
        &self.scene
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn nodes(&self) -> &[BrtNode] {
        &self.nodes
    }
    pub fn node(&self, id: usize) -> Option<&BrtNode> {
        self.nodes.get(id)
    }
    pub fn len(&self) -> usize {
        self.nodes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn goal(&self) -> GaussianBelief {
        self.nodes[0].belief().expect("root belief validated on construction")
    }

    /// `(child, parent, law)` for every edge.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, &AffineFeedbackLaw)> {
        self.nodes.iter().filter_map(|n| Some((n.id, n.parent?, n.edge_law.as_ref()?)))
    }

    pub fn edge(&self, from: usize, to: usize) -> Option<&AffineFeedbackLaw> {
        let n = self.nodes.get(from)?;
        (n.parent == Some(to)).then_some(n.edge_law.as_ref()).flatten()
    }

    /// Ids from `id` up to the root, inclusive.
    pub fn path_to_root(&self, id: usize) -> Vec<usize> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path
    }

    pub fn steerer(&self, settings: SteeringSettings) -> Result<Steerer> {
        Steerer::new(self.system.clone(), self.scene.clone(), settings)
    }

    /// Appends a node under `parent`, returning its id.
    pub fn insert(&mut self, parent: usize, belief: &GaussianBelief, law: AffineFeedbackLaw) -> Result<usize> {
        let depth =
            self.nodes.get(parent).ok_or_else(|| Error::Tree(format!("parent {parent} does not exist")))?.depth + 1;
        if belief.dim() != self.system.n() {
            return Err(Error::invalid("node belief dimension does not match the system"));
        }
        if law.len() != self.horizon || law.state_dim() != self.system.n() || law.input_dim() != self.system.m() {
            return Err(Error::invalid("edge law shape does not match the tree"));
        }
        let id = self.nodes.len();
        self.nodes.push(BrtNode {
            id,
            mean: belief.mean().clone(),
            covariance: belief.covariance().clone(),
            parent: Some(parent),
            edge_law: Some(law),
            children: Vec::new(),
            depth,
        });
        self.nodes[parent].children.push(id);
        Ok(id)
    }

    /// Axis-aligned hull of the node means inflated by `radii`.
    pub fn sampling_box(&self, radii: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let n = self.system.n();
        let mut lo = DVector::from_element(n, f64::INFINITY);
        let mut hi = DVector::from_element(n, f64::NEG_INFINITY);
        for node in &self.nodes {
            for i in 0..n {
                lo[i] = lo[i].min(node.mean[i] - radii[i].abs());
                hi[i] = hi[i].max(node.mean[i] + radii[i].abs());
            }
        }
        (lo, hi)
    }

    /// Nearest node (by mean) to `point`; ties go to the lowest id.
    pub fn nearest_to(&self, point: &DVector<f64>) -> usize {
        let mut best = (f64::INFINITY, 0);
        for node in &self.nodes {
            let d = (&node.mean - point).norm_squared();
            if d < best.0 {
                best = (d, node.id);
            }
        }
        best.1
    }

    /// Replays every edge law and checks it lands in the parent's spectral
    /// terminal set while satisfying the scene.
    pub fn audit(&self) -> Result<Vec<AuditFailure>> {
        let mut failures = Vec::new();
        for (child, parent, law) in self.edges() {
            let report = self.audit_edge(child, parent, law)?;
            if !report.pass {
                failures.push(AuditFailure {
                    node: child,
                    parent,
                    detail: format!(
                        "mean error {:.3e}, terminal margin {:.3e}, state margin {:.3e}, control margin {:.3e}",
                        report.mean_error,
                        report.terminal_margin,
                        report.worst_state_margin,
                        report.worst_control_margin
                    ),
                });
            }
        }
        Ok(failures)
    }

    fn audit_edge(&self, child: usize, parent: usize, law: &AffineFeedbackLaw) -> Result<ManeuverReport> {
        let from = self.nodes[child].belief()?;
        let to = self.nodes[parent].belief()?;
        moments::check_maneuver(&self.system, &from, law, &self.scene, &to, true)
    }

    fn validate_structure(&self) -> Result<()> {
        let (n, m) = (self.system.n(), self.system.m());
        self.scene.check_dims(&self.system)?;
        if self.horizon == 0 {
            return Err(Error::Tree("horizon must be at least 1".into()));
        }
        if self.nodes.is_empty() {
            return Err(Error::Tree("tree has no nodes".into()));
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.id != idx {
                return Err(Error::Tree(format!("node at position {idx} has id {}", node.id)));
            }
            node.belief().map_err(|e| Error::Tree(format!("node {idx}: {e}")))?;
            if node.mean.len() != n {
                return Err(Error::Tree(format!("node {idx} has wrong dimension")));
            }
            match (idx, node.parent, &node.edge_law) {
                (0, None, None) => {
                    if node.depth != 0 {
                        return Err(Error::Tree("root depth must be 0".into()));
                    }
                }
                (0, _, _) => return Err(Error::Tree("root must have neither parent nor edge law".into())),
                (_, Some(p), Some(law)) => {
                    let parent =
                        self.nodes.get(p).ok_or_else(|| Error::Tree(format!("node {idx} has unknown parent {p}")))?;
                    if node.depth != parent.depth + 1 {
                        return Err(Error::Tree(format!(
                            "node {idx} depth {} but parent depth {}",
                            node.depth, parent.depth
                        )));
                    }
                    if !parent.children.contains(&idx) {
                        return Err(Error::Tree(format!("node {idx} missing from children of {p}")));
                    }
                    if law.len() != self.horizon || law.state_dim() != n || law.input_dim() != m {
                        return Err(Error::Tree(format!("edge law of node {idx} has wrong shape")));
                    }
                }
                _ => return Err(Error::Tree(format!("node {idx} must have both a parent and an edge law"))),
            }
            for &c in &node.children {
                if self.nodes.get(c).and_then(|ch| ch.parent) != Some(idx) {
                    return Err(Error::Tree(format!("node {idx} lists {c} as child but it is not")));
                }
            }
        }
        // depth = parent depth + 1 on every edge rules out cycles, since depth
        // would have to increase strictly around one.
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&TreeFile::from(self))?)
    }

    /// Parses a tree file, re-validating structure and (unless `skip_audit`)
    /// replaying every edge.
    pub fn from_json(text: &str, skip_audit: bool) -> Result<Self> {
        let file: TreeFile = serde_json::from_str(text)?;
        let tree = Self::try_from(file)?;
        if !skip_audit {
            if let Some(f) = tree.audit()?.first() {
                return Err(Error::Tree(format!("edge {} -> {} fails replay: {}", f.node, f.parent, f.detail)));
            }
        }
        Ok(tree)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path, skip_audit: bool) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?, skip_audit)
    }
}

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    id: usize,
    #[serde(with = "serde_mat::vector")]
    mean: DVector<f64>,
    #[serde(with = "serde_mat::matrix")]
    covariance: DMatrix<f64>,
    parent: Option<usize>,
    children: Vec<usize>,
    depth: usize,
}

#[derive(Serialize, Deserialize)]
struct EdgeRecord {
    from: usize,
    to: usize,
    law: AffineFeedbackLaw,
}

#[derive(Serialize, Deserialize)]
struct TreeFile {
    version: u32,
    system: LinearGaussianSystem,
    scene: PlanningScene,
    horizon: usize,
    seed: u64,
    nodes: Vec<NodeRecord>,
    edges: Vec<EdgeRecord>,
}

impl From<&Brt> for TreeFile {
    fn from(t: &Brt) -> Self {
        TreeFile {
            version: TREE_FORMAT_VERSION,
            system: t.system.clone(),
            scene: t.scene.clone(),
            horizon: t.horizon,
            seed: t.seed,
            nodes: t
                .nodes
                .iter()
                .map(|n| NodeRecord {
                    id: n.id,
                    mean: n.mean.clone(),
                    covariance: n.covariance.clone(),
                    parent: n.parent,
                    children: n.children.clone(),
                    depth: n.depth,
                })
                .collect(),
            edges: t.edges().map(|(from, to, law)| EdgeRecord { from, to, law: law.clone() }).collect(),
        }
    }
}

impl TryFrom<TreeFile> for Brt {
    type Error = Error;

    fn try_from(f: TreeFile) -> Result<Self> {
        if f.version != TREE_FORMAT_VERSION {
            return Err(Error::Tree(format!("unsupported tree format version {}", f.version)));
        }
        let mut nodes: Vec<BrtNode> = f
            .nodes
            .into_iter()
            .map(|r| BrtNode {
                id: r.id,
                mean: r.mean,
                covariance: r.covariance,
                parent: r.parent,
                edge_law: None,
                children: r.children,
                depth: r.depth,
            })
            .collect();
        for e in f.edges {
            let node =
                nodes.get_mut(e.from).ok_or_else(|| Error::Tree(format!("edge from unknown node {}", e.from)))?;
            if node.parent != Some(e.to) {
                return Err(Error::Tree(format!("edge {} -> {} does not follow the parent pointer", e.from, e.to)));
            }
            if node.edge_law.replace(e.law).is_some() {
                return Err(Error::Tree(format!("duplicate edge from node {}", e.from)));
            }
        }
        let tree = Brt { system: f.system, scene: f.scene, horizon: f.horizon, seed: f.seed, nodes };
        tree.validate_structure()?;
        Ok(tree)
    }
}

/// Voronoi-biased node selection: a uniform point in the tree's sampling
/// box, mapped to the nearest node.
pub fn select_node<R: Rng + ?Sized>(tree: &Brt, radii: &DVector<f64>, rng: &mut R) -> usize {
    let (lo, hi) = tree.sampling_box(radii);
    let point = DVector::from_fn(lo.len(), |i, _| {
        let u: f64 = rng.random();
        lo[i] + u * (hi[i] - lo[i])
    });
    tree.nearest_to(&point)
}

/// Uniform sample from the box `node.mean ± radii`.
pub fn sample_mean_around<R: Rng + ?Sized>(node: &BrtNode, radii: &DVector<f64>, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(node.mean.len(), |i, _| {
        let u: f64 = rng.random();
        node.mean[i] + radii[i].abs() * (2.0 * u - 1.0)
    })
}

/// `V Λ Vᵀ` with eigenvalues uniform in `[eig_lo, eig_hi]` and `V` the
/// orthonormalized factor of a standard-normal matrix.
pub fn sample_psd<R: Rng + ?Sized>(n: usize, eig_lo: f64, eig_hi: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    if !(0.0 <= eig_lo && eig_lo <= eig_hi && eig_hi.is_finite()) {
        return Err(Error::invalid(format!("need 0 <= eig_lo <= eig_hi, got [{eig_lo}, {eig_hi}]")));
    }
    let eigs = DVector::from_fn(n, |_, _| {
        let u: f64 = rng.random();
        eig_lo + u * (eig_hi - eig_lo)
    });
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let v = g.qr().q();
    let m = &v * DMatrix::from_diagonal(&eigs) * v.transpose();
    Ok(linalg::symmetrize(&m))
}

/// Tree growth parameters.
#[derive(Debug, Clone)]
pub struct GrowthOptions {
    pub n_iter: usize,
    /// Stop early once the tree holds this many nodes.
    pub max_nodes: Option<usize>,
    pub radii: DVector<f64>,
    pub settings: SteeringSettings,
}

/// Grows the tree with maximal-covariance edges.
pub fn grow_maxcovar(tree: &mut Brt, opts: &GrowthOptions, rng: &mut TreeRng) -> Result<GrowthReport> {
    grow(tree, GrowthMode::Maxcovar, opts, rng)
}

/// Grows the tree with random covariances bounded by the maximal one.
pub fn grow_randcovar(tree: &mut Brt, opts: &GrowthOptions, rng: &mut TreeRng) -> Result<GrowthReport> {
    grow(tree, GrowthMode::Randcovar, opts, rng)
}

pub fn grow(tree: &mut Brt, mode: GrowthMode, opts: &GrowthOptions, rng: &mut TreeRng) -> Result<GrowthReport> {
    let n = tree.system.n();
    if opts.radii.len() != n {
        return Err(Error::invalid(format!("radii have length {} but n = {n}", opts.radii.len())));
    }
    let steerer = tree.steerer(opts.settings.clone())?;
    let mut report = GrowthReport::default();
    for iteration in 0..opts.n_iter {
        if opts.max_nodes.is_some_and(|cap| tree.len() >= cap) {
            break;
        }
        let start = Instant::now();
        let selected = select_node(tree, &opts.radii, &mut rng.selection);
        let mu_q = sample_mean_around(&tree.nodes[selected], &opts.radii, &mut rng.mean);
        let target = tree.nodes[selected].belief()?;
        let mut record = IterationRecord {
            iteration,
            selected,
            mu_q: mu_q.clone(),
            accepted: None,
            lambda_max_covar: None,
            lambda_node: None,
            reject_reason: None,
            seconds: 0.0,
        };
        // drawn every iteration so rejections do not shift later draws
        let unit_sigma = match mode {
            GrowthMode::Randcovar => Some(sample_psd(n, 0.01, 1.0, &mut rng.covariance)?),
            GrowthMode::Maxcovar => None,
        };
        let outcome = (|| -> Result<(GaussianBelief, AffineFeedbackLaw)> {
            let mc = steerer.max_covar(&mu_q, &target, tree.horizon)?;
            let lam = linalg::min_eigenvalue(&mc.sigma_max)?;
            record.lambda_max_covar = Some(lam);
            match mode {
                GrowthMode::Maxcovar => Ok((GaussianBelief::new(mu_q.clone(), mc.sigma_max)?, mc.law)),
                GrowthMode::Randcovar => {
                    let sigma = unit_sigma.as_ref().expect("drawn in randcovar mode") * lam;
                    let q = GaussianBelief::new(mu_q.clone(), sigma)?;
                    let w = SteeringWeights::control_effort(n, tree.system.m(), tree.horizon);
                    let sol = steerer.opt_steer(&q, &target, tree.horizon, &w, true)?;
                    Ok((q, sol.law))
                }
            }
        })();
        match outcome {
            Ok((belief, law)) => {
                let check = moments::check_maneuver(&tree.system, &belief, &law, &tree.scene, &target, true)?;
                if check.pass {
                    record.lambda_node = Some(linalg::min_eigenvalue(belief.covariance())?);
                    record.accepted = Some(tree.insert(selected, &belief, law)?);
                } else {
                    record.reject_reason = Some("edge failed replay".into());
                }
            }
            Err(e) => {
                log::debug!("iteration {iteration}: rejected ({e})");
                record.reject_reason = Some(e.to_string());
            }
        }
        record.seconds = start.elapsed().as_secs_f64();
        report.iterations.push(record);
    }
    Ok(report)
}
