//! Domain types shared by every module. All of them validate on
//! construction (and on deserialization) and are immutable afterwards.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, PSD_TOL};
use crate::serde_mat;

/// Discrete-time dynamics `x' = A x + B u + D w`, `w ~ N(0, I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SystemRepr", into = "SystemRepr")]
pub struct LinearGaussianSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    d: DMatrix<f64>,
    dt: f64,
}

#[derive(Serialize, Deserialize)]
struct SystemRepr {
    #[serde(with = "serde_mat::matrix")]
    a: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    b: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    d: DMatrix<f64>,
    n: usize,
    m: usize,
    dt: f64,
}

impl TryFrom<SystemRepr> for LinearGaussianSystem {
    type Error = Error;

    fn try_from(r: SystemRepr) -> Result<Self> {
        let sys = Self::new(r.a, r.b, r.d, r.dt)?;
        if sys.n() != r.n || sys.m() != r.m {
            return Err(Error::invalid(format!(
                "declared (n, m) = ({}, {}) but matrices imply ({}, {})",
                r.n,
                r.m,
                sys.n(),
                sys.m()
            )));
        }
        Ok(sys)
    }
}

impl From<LinearGaussianSystem> for SystemRepr {
    fn from(s: LinearGaussianSystem) -> Self {
        let (n, m) = (s.n(), s.m());
        SystemRepr { a: s.a, b: s.b, d: s.d, n, m, dt: s.dt }
    }
}

impl LinearGaussianSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, d: DMatrix<f64>, dt: f64) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || !a.is_square() {
            return Err(Error::invalid(format!("A must be square and non-empty, got {:?}", a.shape())));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::invalid(format!("B must be {n}x m with m >= 1, got {:?}", b.shape())));
        }
        if d.shape() != (n, n) {
            return Err(Error::invalid(format!("D must be {n}x{n}, got {:?}", d.shape())));
        }
        if a.iter().chain(b.iter()).chain(d.iter()).any(|x| !x.is_finite()) {
            return Err(Error::invalid("system matrices contain non-finite entries"));
        }
        let sv = a.clone().singular_values();
        let smax = sv.max();
        let smin = sv.min();
        if smin < 1e-12 * smax || smax == 0.0 {
            return Err(Error::invalid(format!("A is numerically singular (singular values {smin:.3e} / {smax:.3e})")));
        }
        Ok(Self { a, b, d, dt })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// Process noise covariance `D Dᵀ`.
    pub fn noise_covariance(&self) -> DMatrix<f64> {
        &self.d * self.d.transpose()
    }

    /// Planar integrator chain of the given order: `order = 2` is a double
    /// integrator, `order = 3` a triple integrator. State is stacked as
    /// `[p; ṗ; p̈ ...]` blocks of `dim` coordinates with control entering the
    /// last block.
    pub fn integrator_chain(order: usize, dim: usize, dt: f64, noise: f64) -> Result<Self> {
        if order == 0 || dim == 0 {
            return Err(Error::invalid("integrator chain needs order >= 1 and dim >= 1"));
        }
        let n = order * dim;
        let mut a = DMatrix::identity(n, n);
        for blk in 0..order - 1 {
            for i in 0..dim {
                a[(blk * dim + i, (blk + 1) * dim + i)] = dt;
            }
        }
        let mut b = DMatrix::zeros(n, dim);
        for i in 0..dim {
            b[((order - 1) * dim + i, i)] = dt;
        }
        Self::new(a, b, DMatrix::identity(n, n) * noise, dt)
    }
}

/// Gaussian state distribution `N(mean, covariance)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BeliefRepr", into = "BeliefRepr")]
pub struct GaussianBelief {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct BeliefRepr {
    #[serde(with = "serde_mat::vector")]
    mean: DVector<f64>,
    #[serde(with = "serde_mat::matrix")]
    covariance: DMatrix<f64>,
}

impl TryFrom<BeliefRepr> for GaussianBelief {
    type Error = Error;
    fn try_from(r: BeliefRepr) -> Result<Self> {
        Self::new(r.mean, r.covariance)
    }
}

impl From<GaussianBelief> for BeliefRepr {
    fn from(b: GaussianBelief) -> Self {
        BeliefRepr { mean: b.mean, covariance: b.covariance }
    }
}

impl GaussianBelief {
    /// Stores `(Σ + Σᵀ)/2`; rejects asymmetry or negative eigenvalues beyond 1e-9.
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if covariance.shape() != (n, n) {
            return Err(Error::invalid(format!("covariance must be {n}x{n}, got {:?}", covariance.shape())));
        }
        if mean.iter().chain(covariance.iter()).any(|x| !x.is_finite()) {
            return Err(Error::invalid("belief contains non-finite entries"));
        }
        let asym = linalg::max_asymmetry(&covariance);
        if asym > PSD_TOL {
            return Err(Error::invalid(format!("covariance asymmetric by {asym:.3e}")));
        }
        let covariance = linalg::symmetrize(&covariance);
        if n > 0 {
            let lo = linalg::min_eigenvalue(&covariance)?;
            if lo < -PSD_TOL {
                return Err(Error::invalid(format!("covariance not PSD (min eigenvalue {lo:.3e})")));
            }
        }
        Ok(Self { mean, covariance })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }
    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Same mean, covariance multiplied by `factor >= 0`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.mean.clone(), &self.covariance * factor)
    }
}

/// Chance constraint `P(αᵀz ≤ β) ≥ 1 − ε` on a state or control vector `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ConstraintRepr", into = "ConstraintRepr")]
pub struct HalfspaceChanceConstraint {
    alpha: DVector<f64>,
    beta: f64,
    epsilon: f64,
}

#[derive(Serialize, Deserialize)]
struct ConstraintRepr {
    #[serde(with = "serde_mat::vector")]
    alpha: DVector<f64>,
    beta: f64,
    epsilon: f64,
}

impl TryFrom<ConstraintRepr> for HalfspaceChanceConstraint {
    type Error = Error;
    fn try_from(r: ConstraintRepr) -> Result<Self> {
        Self::new(r.alpha, r.beta, r.epsilon)
    }
}

impl From<HalfspaceChanceConstraint> for ConstraintRepr {
    fn from(c: HalfspaceChanceConstraint) -> Self {
        ConstraintRepr { alpha: c.alpha, beta: c.beta, epsilon: c.epsilon }
    }
}

impl HalfspaceChanceConstraint {
    pub fn new(alpha: DVector<f64>, beta: f64, epsilon: f64) -> Result<Self> {
        if !(0.0..=0.5).contains(&epsilon) {
            return Err(Error::invalid(format!("epsilon {epsilon} outside [0, 0.5]")));
        }
        if alpha.iter().all(|&a| a == 0.0) {
            return Err(Error::invalid("alpha must have a nonzero entry"));
        }
        if alpha.iter().any(|a| !a.is_finite()) || beta.is_nan() {
            return Err(Error::invalid("constraint has non-finite coefficients"));
        }
        Ok(Self { alpha, beta, epsilon })
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }
    pub fn beta(&self) -> f64 {
        self.beta
    }
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    /// The pair `±e_i ≤ bound` for every coordinate of an `m`-vector.
    pub fn box_bounds(m: usize, bound: f64, epsilon: f64) -> Result<Vec<Self>> {
        let mut out = Vec::with_capacity(2 * m);
        for i in 0..m {
            for sign in [1.0, -1.0] {
                let mut alpha = DVector::zeros(m);
                alpha[i] = sign;
                out.push(Self::new(alpha, bound, epsilon)?);
            }
        }
        Ok(out)
    }
}

/// Constraint set plus the linearization references for the chance constraints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SceneRepr", into = "SceneRepr")]
pub struct PlanningScene {
    state_constraints: Vec<HalfspaceChanceConstraint>,
    control_constraints: Vec<HalfspaceChanceConstraint>,
    sigma_ref: DMatrix<f64>,
    y_ref: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct SceneRepr {
    #[serde(default)]
    state_constraints: Vec<HalfspaceChanceConstraint>,
    #[serde(default)]
    control_constraints: Vec<HalfspaceChanceConstraint>,
    #[serde(with = "serde_mat::matrix")]
    sigma_ref: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    y_ref: DMatrix<f64>,
}

impl TryFrom<SceneRepr> for PlanningScene {
    type Error = Error;
    fn try_from(r: SceneRepr) -> Result<Self> {
        Self::new(r.state_constraints, r.control_constraints, r.sigma_ref, r.y_ref)
    }
}

impl From<PlanningScene> for SceneRepr {
    fn from(s: PlanningScene) -> Self {
        SceneRepr {
            state_constraints: s.state_constraints,
            control_constraints: s.control_constraints,
            sigma_ref: s.sigma_ref,
            y_ref: s.y_ref,
        }
    }
}

impl PlanningScene {
    pub fn new(
        state_constraints: Vec<HalfspaceChanceConstraint>,
        control_constraints: Vec<HalfspaceChanceConstraint>,
        sigma_ref: DMatrix<f64>,
        y_ref: DMatrix<f64>,
    ) -> Result<Self> {
        for (name, r) in [("sigma_ref", &sigma_ref), ("y_ref", &y_ref)] {
            if !r.is_square() || r.nrows() == 0 {
                return Err(Error::invalid(format!("{name} must be square and non-empty")));
            }
            if linalg::min_eigenvalue(r)? <= 0.0 {
                return Err(Error::invalid(format!("{name} must be positive definite")));
            }
        }
        let n = sigma_ref.nrows();
        let m = y_ref.nrows();
        if let Some(c) = state_constraints.iter().find(|c| c.dim() != n) {
            return Err(Error::invalid(format!("state constraint has dim {} but n = {n}", c.dim())));
        }
        if let Some(c) = control_constraints.iter().find(|c| c.dim() != m) {
            return Err(Error::invalid(format!("control constraint has dim {} but m = {m}", c.dim())));
        }
        Ok(Self {
            state_constraints,
            control_constraints,
            sigma_ref: linalg::symmetrize(&sigma_ref),
            y_ref: linalg::symmetrize(&y_ref),
        })
    }

    /// Scene without chance constraints, identity references.
    pub fn unconstrained(n: usize, m: usize) -> Self {
        Self {
            state_constraints: Vec::new(),
            control_constraints: Vec::new(),
            sigma_ref: DMatrix::identity(n, n),
            y_ref: DMatrix::identity(m, m),
        }
    }

    pub fn state_constraints(&self) -> &[HalfspaceChanceConstraint] {
        &self.state_constraints
    }
    pub fn control_constraints(&self) -> &[HalfspaceChanceConstraint] {
        &self.control_constraints
    }
    pub fn sigma_ref(&self) -> &DMatrix<f64> {
        &self.sigma_ref
    }
    pub fn y_ref(&self) -> &DMatrix<f64> {
        &self.y_ref
    }

    pub fn check_dims(&self, system: &LinearGaussianSystem) -> Result<()> {
        if self.sigma_ref.nrows() != system.n() || self.y_ref.nrows() != system.m() {
            return Err(Error::invalid(format!(
                "scene is for (n, m) = ({}, {}) but system has ({}, {})",
                self.sigma_ref.nrows(),
                self.y_ref.nrows(),
                system.n(),
                system.m()
            )));
        }
        Ok(())
    }
}

/// One step `u = K (x − μ) + v` of a feedback law; `K` is `m × n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackStep {
    #[serde(with = "serde_mat::matrix")]
    pub k: DMatrix<f64>,
    #[serde(with = "serde_mat::vector")]
    pub v: DVector<f64>,
}

/// Finite sequence of affine feedback steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LawRepr", into = "LawRepr")]
pub struct AffineFeedbackLaw {
    steps: Vec<FeedbackStep>,
}

#[derive(Serialize, Deserialize)]
struct LawRepr {
    steps: Vec<FeedbackStep>,
}

impl TryFrom<LawRepr> for AffineFeedbackLaw {
    type Error = Error;
    fn try_from(r: LawRepr) -> Result<Self> {
        Self::new(r.steps)
    }
}

impl From<AffineFeedbackLaw> for LawRepr {
    fn from(l: AffineFeedbackLaw) -> Self {
        LawRepr { steps: l.steps }
    }
}

impl AffineFeedbackLaw {
    pub fn new(steps: Vec<FeedbackStep>) -> Result<Self> {
        let first = steps.first().ok_or_else(|| Error::invalid("feedback law needs at least one step"))?;
        let (m, n) = first.k.shape();
        for (i, s) in steps.iter().enumerate() {
            if s.k.shape() != (m, n) || s.v.len() != m {
                return Err(Error::invalid(format!(
                    "step {i}: K {:?} / v {} inconsistent with {m}x{n}",
                    s.k.shape(),
                    s.v.len()
                )));
            }
        }
        Ok(Self { steps })
    }

    /// `len` steps of zero gain and zero feedforward.
    pub fn zeros(len: usize, m: usize, n: usize) -> Result<Self> {
        Self::new(vec![FeedbackStep { k: DMatrix::zeros(m, n), v: DVector::zeros(m) }; len])
    }

    pub fn steps(&self) -> &[FeedbackStep] {
        &self.steps
    }
    pub fn len(&self) -> usize {
        self.steps.len()
    }
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
    pub fn input_dim(&self) -> usize {
        self.steps[0].k.nrows()
    }
    pub fn state_dim(&self) -> usize {
        self.steps[0].k.ncols()
    }

    /// Copy with a single step replaced, for fault injection and testing.
    pub fn with_step(&self, index: usize, step: FeedbackStep) -> Result<Self> {
        let mut steps = self.steps.clone();
        *steps.get_mut(index).ok_or_else(|| Error::invalid(format!("step {index} out of range")))? = step;
        Self::new(steps)
    }

    pub(crate) fn from_parts(steps: Vec<FeedbackStep>) -> Self {
        Self { steps }
    }
}

/// Per-step cost weights `Q_k ⪰ 0`, `R_k ≻ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringWeights {
    q: Vec<DMatrix<f64>>,
    r: Vec<DMatrix<f64>>,
}

impl SteeringWeights {
    pub fn new(q: Vec<DMatrix<f64>>, r: Vec<DMatrix<f64>>) -> Result<Self> {
        if q.len() != r.len() {
            return Err(Error::invalid("Q and R lists must have equal length"));
        }
        for (k, (qk, rk)) in q.iter().zip(&r).enumerate() {
            if linalg::min_eigenvalue(qk)? < -PSD_TOL {
                return Err(Error::invalid(format!("Q_{k} is not PSD")));
            }
            if linalg::min_eigenvalue(rk)? <= 0.0 {
                return Err(Error::invalid(format!("R_{k} is not positive definite")));
            }
        }
        Ok(Self { q, r })
    }

    /// `Q_k = 0`, `R_k = I` for `horizon` steps.
    pub fn control_effort(n: usize, m: usize, horizon: usize) -> Self {
        Self { q: vec![DMatrix::zeros(n, n); horizon], r: vec![DMatrix::identity(m, m); horizon] }
    }

    /// All-zero weights: a pure feasibility problem. `R_k = 0` is allowed here
    /// only through this constructor.
    pub fn zero(n: usize, m: usize, horizon: usize) -> Self {
        Self { q: vec![DMatrix::zeros(n, n); horizon], r: vec![DMatrix::zeros(m, m); horizon] }
    }

    pub fn q(&self) -> &[DMatrix<f64>] {
        &self.q
    }
    pub fn r(&self) -> &[DMatrix<f64>] {
        &self.r
    }
    pub fn horizon(&self) -> usize {
        self.q.len()
    }
}
