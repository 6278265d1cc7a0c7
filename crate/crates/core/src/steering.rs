//! Covariance-steering semidefinite programs.
//!
//! Both programs use the lifted variables `U_k = K_k Σ_k` and `Y_k ⪰ U_k Σ_k⁻¹ U_kᵀ`
//! (a Schur-complement LMI), which turns the covariance recursion into the
//! linear equality
//!
//! ```text
//! Σ_{k+1} = A Σ_k Aᵀ + B U_k Aᵀ + A U_kᵀ Bᵀ + B Y_k Bᵀ + D Dᵀ
//! ```
//!
//! and the square-root chance constraints are replaced by their tangent
//! lines at the scene references `Σ_r`, `Y_r`. The tangent of a concave
//! function lies above it, so any point accepted by the program also
//! satisfies the exact chance constraints.
//!
//! Every solution is replayed through the exact moment recursion before it
//! is returned.

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conic::{self, AffineExpr, ConicProgram, ConicSettings, ConicSolution, MatExpr, SolveStatus};
use crate::error::{Error, Result};
use crate::linalg;
use crate::moments::{self, chance_quantile, ManeuverReport, MomentTrajectory};
use crate::serde_mat;
use crate::types::{
    AffineFeedbackLaw, FeedbackStep, GaussianBelief, HalfspaceChanceConstraint, LinearGaussianSystem, PlanningScene,
    SteeringWeights,
};

/// Tangent-line form `coef · αᵀXα + αᵀz − rhs ≤ 0` of a chance constraint,
/// where `X` is `Σ_k` (state) or `Y_k` (control) and `z` is `μ_k` or `v_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedChance {
    pub alpha: DVector<f64>,
    pub coef: f64,
    pub rhs: f64,
}

impl LinearizedChance {
    pub fn lhs(&self, x: &DMatrix<f64>, z: &DVector<f64>) -> f64 {
        self.coef * self.alpha.dot(&(x * &self.alpha)) + self.alpha.dot(z) - self.rhs
    }

    fn expr(&self, x: &MatExpr, z: &MatExpr) -> AffineExpr {
        x.quad_form(&self.alpha).scale(self.coef).add(&z.dot(&self.alpha)).plus_constant(-self.rhs)
    }
}

fn linearize(c: &HalfspaceChanceConstraint, reference: &DMatrix<f64>) -> Result<LinearizedChance> {
    if reference.shape() != (c.dim(), c.dim()) {
        return Err(Error::invalid("linearization reference has wrong dimension"));
    }
    let q = chance_quantile(c.epsilon());
    if !q.is_finite() {
        return Err(Error::invalid("cannot linearize a hard constraint (epsilon = 0)"));
    }
    let s = c.alpha().dot(&(reference * c.alpha()));
    if s <= 0.0 || !s.is_finite() {
        return Err(Error::invalid(format!("degenerate linearization reference (αᵀRα = {s:.3e})")));
    }
    let root = s.sqrt();
    Ok(LinearizedChance { alpha: c.alpha().clone(), coef: q / (2.0 * root), rhs: c.beta() - 0.5 * q * root })
}

/// Linearizes `Φ⁻¹(1−ε)√(αᵀΣα) + αᵀμ − β ≤ 0` around `Σ_r`.
pub fn linearize_state_chance(c: &HalfspaceChanceConstraint, sigma_ref: &DMatrix<f64>) -> Result<LinearizedChance> {
    linearize(c, sigma_ref)
}

/// Linearizes `Φ⁻¹(1−ε)√(αᵀYα) + αᵀv − β ≤ 0` around `Y_r`.
pub fn linearize_control_chance(c: &HalfspaceChanceConstraint, y_ref: &DMatrix<f64>) -> Result<LinearizedChance> {
    linearize(c, y_ref)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringSettings {
    pub conic: ConicSettings,
    /// Relative tightening of every linearized right-hand side.
    pub backoff: f64,
    /// Relative tightening of the terminal covariance bound. Replayed
    /// covariances drift from the program's by solver-tolerance residuals
    /// accumulated over the horizon, so this is larger than `backoff`.
    pub terminal_backoff: f64,
    /// Maximum relative Frobenius gap between the program's covariance
    /// trajectory and the replayed one; `None` disables the check.
    pub replay_tolerance: Option<f64>,
    /// Relative shrink applied to the maximal covariance before the
    /// controller is re-derived from it.
    pub max_covar_shrink: f64,
    /// Directory to dump every built program as JSON.
    pub dump_dir: Option<PathBuf>,
}

impl Default for SteeringSettings {
    fn default() -> Self {
        Self {
            conic: ConicSettings {
                tol_feas: 1e-10,
                tol_gap_abs: 1e-10,
                tol_gap_rel: 1e-10,
                ..ConicSettings::default()
            },
            backoff: 1e-6,
            terminal_backoff: 5e-5,
            replay_tolerance: Some(1e-5),
            max_covar_shrink: 1e-4,
            dump_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProgramKind {
    OptSteer,
    MaxCovar,
}

/// A built steering program plus what is needed to read its solution back.
#[derive(Debug, Clone)]
pub struct SteeringProgram {
    pub program: ConicProgram,
    pub kind: ProgramKind,
    pub horizon: usize,
    pub initial_mean: DVector<f64>,
    /// Fixed `Σ_0`; `None` when `Σ_0` is a decision variable.
    pub initial_covariance: Option<DMatrix<f64>>,
    /// Covariance-type variables (`Σ_k`, `U_k`, `Y_k`) are stored divided
    /// by this factor.
    pub cov_scale: f64,
}

fn sigma_name(k: usize) -> String {
    format!("Sigma_{k}")
}
fn u_name(k: usize) -> String {
    format!("U_{k}")
}
fn y_name(k: usize) -> String {
    format!("Y_{k}")
}
fn v_name(k: usize) -> String {
    format!("v_{k}")
}
fn mu_name(k: usize) -> String {
    format!("mu_{k}")
}
const EPIGRAPH_T: &str = "t";

/// Solved steering maneuver: recovered law, program trajectory, lifted variables.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SteeringSolution {
    pub status: SolveStatus,
    pub law: AffineFeedbackLaw,
    /// Moments read from the program variables.
    pub trajectory: MomentTrajectory,
    #[serde(with = "serde_mat::matrices")]
    pub aux_u: Vec<DMatrix<f64>>,
    #[serde(with = "serde_mat::matrices")]
    pub aux_y: Vec<DMatrix<f64>>,
    pub objective_value: f64,
    /// Exact replay of `law` from the program's initial belief.
    pub replay: ManeuverReport,
    /// Largest relative Frobenius gap between program and replayed covariances.
    pub replay_deviation: f64,
    /// Steps where `Σ_k` was singular and a pseudo-inverse was used.
    pub pseudo_inverse_steps: Vec<usize>,
}

/// Result of a maximal-covariance solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaxCovarSolution {
    pub status: SolveStatus,
    #[serde(with = "serde_mat::matrix")]
    pub sigma_max: DMatrix<f64>,
    pub law: AffineFeedbackLaw,
    /// `λ_min` of the maximal covariance reported by the first-stage program.
    pub lambda_min: f64,
    pub steering: SteeringSolution,
}

static DUMP_COUNTER: AtomicUsize = AtomicUsize::new(0);

/// Steering programs for one system and scene.
#[derive(Debug, Clone)]
pub struct Steerer {
    system: LinearGaussianSystem,
    scene: PlanningScene,
    settings: SteeringSettings,
    state_lin: Vec<LinearizedChance>,
    control_lin: Vec<LinearizedChance>,
}

impl Steerer {
    pub fn new(system: LinearGaussianSystem, scene: PlanningScene, settings: SteeringSettings) -> Result<Self> {
        scene.check_dims(&system)?;
        let state_lin = scene
            .state_constraints()
            .iter()
            .map(|c| linearize_state_chance(c, scene.sigma_ref()))
            .collect::<Result<_>>()?;
        let control_lin = scene
            .control_constraints()
            .iter()
            .map(|c| linearize_control_chance(c, scene.y_ref()))
            .collect::<Result<_>>()?;
        Ok(Self { system, scene, settings, state_lin, control_lin })
    }

    pub fn system(&self) -> &LinearGaussianSystem {
        &self.system
    }
    pub fn scene(&self) -> &PlanningScene {
        &self.scene
    }
    pub fn settings(&self) -> &SteeringSettings {
        &self.settings
    }

    pub fn with_settings(&self, settings: SteeringSettings) -> Self {
        Self { settings, ..self.clone() }
    }

    fn check_belief(&self, b: &GaussianBelief, what: &str) -> Result<()> {
        if b.dim() != self.system.n() {
            return Err(Error::invalid(format!("{what} has dim {} but n = {}", b.dim(), self.system.n())));
        }
        Ok(())
    }

    /// Adds the dynamics, LMI, chance and terminal constraints shared by
    /// both programs. Returns `(Σ_0..Σ_N, μ_0..μ_N, Y_0..Y_{N-1}, v_0..v_{N-1})`
    /// as expressions.
    fn add_steering_constraints(
        &self,
        p: &mut ConicProgram,
        sigma0: MatExpr,
        mu0: &DVector<f64>,
        target: &GaussianBelief,
        horizon: usize,
        spectral_terminal: bool,
        scale: f64,
    ) -> Result<(Vec<MatExpr>, Vec<MatExpr>, Vec<MatExpr>, Vec<MatExpr>)> {
        let (n, m) = (self.system.n(), self.system.m());
        let a = self.system.a();
        let b = self.system.b();
        let at = a.transpose();
        let bt = b.transpose();
        let noise = self.system.noise_covariance() / scale;
        let shrink = 1.0 - self.settings.terminal_backoff;

        let mut sigmas = vec![sigma0];
        let mut mus = vec![MatExpr::constant(&DMatrix::from_column_slice(n, 1, mu0.as_slice()))];
        let mut ys = Vec::with_capacity(horizon);
        let mut vs = Vec::with_capacity(horizon);
        for k in 0..horizon {
            let u = p.add_dense(&u_name(k), m, n);
            let y = p.add_symmetric(&y_name(k), m);
            let v = p.add_dense(&v_name(k), m, 1);
            let sigma_next = p.add_symmetric(&sigma_name(k + 1), n);
            let mu_next = p.add_dense(&mu_name(k + 1), n, 1);
            let sigma = &sigmas[k];
            let mu = &mus[k];

            p.add_psd(MatExpr::block2(sigma, &u.transpose(), &u, &y));

            let bua = u.left_mul(b).right_mul(&at);
            let g = sigma
                .left_mul(a)
                .right_mul(&at)
                .add(&bua)
                .add(&bua.transpose())
                .add(&y.left_mul(b).right_mul(&bt))
                .add_constant(&noise)
                .sub(&sigma_next)
                .symmetrized();
            p.add_matrix_eq(&g);

            let mean_rec = mu.left_mul(a).add(&v.left_mul(b)).sub(&mu_next);
            for e in mean_rec.entries() {
                p.add_eq(e.clone());
            }

            for (lin, c) in self.state_lin.iter().zip(self.scene.state_constraints()) {
                let e = lin.expr(&sigma.scale(scale), mu).plus_constant(self.settings.backoff * lin.rhs.abs());
                if e.is_constant() {
                    // Fixed Σ_k, μ_k: the exact margin is available.
                    let mu_val = mu.eval(&[]).column(0).into_owned();
                    let exact = moments::state_chance_margin(&mu_val, &(sigma.eval(&[]) * scale), c)?;
                    if exact > 0.0 {
                        p.add_ineq(AffineExpr::constant(exact));
                    }
                } else {
                    p.add_ineq(e);
                }
            }
            for lin in &self.control_lin {
                p.add_ineq(lin.expr(&y.scale(scale), &v).plus_constant(self.settings.backoff * lin.rhs.abs()));
            }

            sigmas.push(sigma_next);
            mus.push(mu_next);
            ys.push(y);
            vs.push(v);
        }

        let sigma_n = &sigmas[horizon];
        let bound = if spectral_terminal {
            let c = linalg::min_eigenvalue(target.covariance())? * shrink;
            DMatrix::identity(n, n) * c
        } else {
            target.covariance() * shrink
        } / scale;
        p.add_psd(MatExpr::constant(&bound).sub(sigma_n));
        let goal_mean = MatExpr::constant(&DMatrix::from_column_slice(n, 1, target.mean().as_slice()));
        for e in mus[horizon].sub(&goal_mean).entries() {
            p.add_eq(e.clone());
        }
        Ok((sigmas, mus, ys, vs))
    }

    /// Builds the relaxed, linearized minimum-cost steering program from
    /// `initial` to `goal` over `horizon` steps.
    pub fn build_opt_steer(
        &self,
        initial: &GaussianBelief,
        goal: &GaussianBelief,
        horizon: usize,
        weights: &SteeringWeights,
        spectral_terminal: bool,
    ) -> Result<SteeringProgram> {
        if horizon == 0 {
            return Err(Error::invalid("horizon must be at least 1"));
        }
        self.check_belief(initial, "initial belief")?;
        self.check_belief(goal, "goal belief")?;
        if weights.horizon() != horizon {
            return Err(Error::invalid(format!("weights cover {} steps but horizon is {horizon}", weights.horizon())));
        }
        let (n, m) = (self.system.n(), self.system.m());
        if weights.q().iter().any(|q| q.shape() != (n, n)) || weights.r().iter().any(|r| r.shape() != (m, m)) {
            return Err(Error::invalid("weight matrices do not match system dimensions"));
        }

        let scale = covariance_scale(goal);
        let mut p = ConicProgram::new();
        let sigma0 = MatExpr::constant(&(initial.covariance() / scale));
        let (sigmas, mus, ys, vs) =
            self.add_steering_constraints(&mut p, sigma0, initial.mean(), goal, horizon, spectral_terminal, scale)?;

        let mut objective = Vec::new();
        for k in 0..horizon {
            let (q, r) = (&weights.q()[k], &weights.r()[k]);
            objective.push(sigmas[k].trace_with(q).scale(scale));
            objective.push(ys[k].trace_with(r).scale(scale));
            if q.amax() > 0.0 {
                objective.push(quadratic_epigraph(&mut p, &format!("cost_mu_{k}"), &mus[k], q));
            }
            if r.amax() > 0.0 {
                objective.push(quadratic_epigraph(&mut p, &format!("cost_v_{k}"), &vs[k], r));
            }
        }
        p.minimize(AffineExpr::combination(objective.iter().map(|e| (1.0, e))));

        Ok(SteeringProgram {
            program: p,
            kind: ProgramKind::OptSteer,
            horizon,
            initial_mean: initial.mean().clone(),
            initial_covariance: Some(initial.covariance().clone()),
            cov_scale: scale,
        })
    }

    /// Builds the program that maximizes `λ_min(Σ_0)` over initial
    /// covariances at mean `mu_q` that can be steered into `target`
    /// (`λ_max(Σ_N) ≤ λ_min(Σ_target)`) within `horizon` steps.
    pub fn build_max_covar(
        &self,
        mu_q: &DVector<f64>,
        target: &GaussianBelief,
        horizon: usize,
    ) -> Result<SteeringProgram> {
        if horizon == 0 {
            return Err(Error::invalid("horizon must be at least 1"));
        }
        if mu_q.len() != self.system.n() {
            return Err(Error::invalid("query mean has wrong dimension"));
        }
        self.check_belief(target, "target belief")?;
        let n = self.system.n();
        let scale = covariance_scale(target);
        let mut p = ConicProgram::new();
        let sigma0 = p.add_symmetric(&sigma_name(0), n);
        let t = p.add_scalar(EPIGRAPH_T);
        let t_eye = MatExpr::from_fn(n, n, |i, j| if i == j { t.clone() } else { AffineExpr::default() });
        p.add_psd(sigma0.sub(&t_eye));
        self.add_steering_constraints(&mut p, sigma0, mu_q, target, horizon, true, scale)?;
        p.minimize(t.scale(-1.0));
        Ok(SteeringProgram {
            program: p,
            kind: ProgramKind::MaxCovar,
            horizon,
            initial_mean: mu_q.clone(),
            initial_covariance: None,
            cov_scale: scale,
        })
    }

    fn solve_program(&self, sp: &SteeringProgram) -> Result<ConicSolution> {
        if let Some(dir) = &self.settings.dump_dir {
            std::fs::create_dir_all(dir)?;
            let idx = DUMP_COUNTER.fetch_add(1, Ordering::Relaxed);
            let kind = match sp.kind {
                ProgramKind::OptSteer => "opt_steer",
                ProgramKind::MaxCovar => "max_covar",
            };
            std::fs::write(dir.join(format!("{kind}-{idx:06}.json")), sp.program.to_json()?)?;
        }
        conic::solve(&sp.program, &self.settings.conic)
    }

    /// Reads `Σ_k, U_k, Y_k, v_k, μ_k` and recovers `K_k = U_k Σ_k⁻¹`.
    pub fn recover_controller(&self, solution: &ConicSolution, sp: &SteeringProgram) -> Result<RecoveredController> {
        if !solution.status.has_solution() {
            return Err(Error::NotSolved(solution.status));
        }
        let p = &sp.program;
        let sigma0 = match &sp.initial_covariance {
            Some(s) => s.clone(),
            None => linalg::symmetrize(&solution.matrix(p, &sigma_name(0))?) * sp.cov_scale,
        };
        let mut covariances = vec![sigma0];
        let mut means = vec![sp.initial_mean.clone()];
        let mut steps = Vec::with_capacity(sp.horizon);
        let mut aux_u = Vec::with_capacity(sp.horizon);
        let mut aux_y = Vec::with_capacity(sp.horizon);
        let mut pinv_steps = Vec::new();
        for k in 0..sp.horizon {
            let u = solution.matrix(p, &u_name(k))? * sp.cov_scale;
            let y = solution.matrix(p, &y_name(k))? * sp.cov_scale;
            let v = solution.vector(p, &v_name(k))?;
            let (gain, used_pinv) =
                gain_from_lifted(&u, &covariances[k]).map_err(|detail| Error::RecoveryFailed { step: k, detail })?;
            if used_pinv {
                pinv_steps.push(k);
            }
            steps.push(FeedbackStep { k: gain, v });
            aux_u.push(u);
            aux_y.push(y);
            covariances.push(linalg::symmetrize(&solution.matrix(p, &sigma_name(k + 1))?) * sp.cov_scale);
            means.push(solution.vector(p, &mu_name(k + 1))?);
        }
        Ok(RecoveredController {
            law: AffineFeedbackLaw::from_parts(steps),
            trajectory: MomentTrajectory { means, covariances },
            aux_u,
            aux_y,
            pseudo_inverse_steps: pinv_steps,
        })
    }

    /// Solves, recovers, and replay-verifies a built program against `goal`.
    fn solve_and_verify(
        &self,
        sp: &SteeringProgram,
        goal: &GaussianBelief,
        spectral_terminal: bool,
        check_tightness: bool,
    ) -> Result<SteeringSolution> {
        let sol = self.solve_program(sp)?;
        if !sol.status.has_solution() {
            return Err(Error::NotSolved(sol.status));
        }
        let rec = self.recover_controller(&sol, sp)?;
        let initial = GaussianBelief::new(sp.initial_mean.clone(), rec.trajectory.covariances[0].clone())?;
        let law = polish_terminal_mean(&self.system, &initial, rec.law, goal)?;
        let replay = moments::check_maneuver(&self.system, &initial, &law, &self.scene, goal, spectral_terminal)?;
        if !replay.pass {
            return Err(Error::RelaxationGap(format!(
                "replay failed (status {}, mean error {:.3e}, terminal margin {:.3e}, state {:.3e}, control {:.3e})",
                sol.status,
                replay.mean_error,
                replay.terminal_margin,
                replay.worst_state_margin,
                replay.worst_control_margin
            )));
        }
        let replayed = moments::propagate(&self.system, &initial, &law)?;
        let replay_deviation = replayed
            .covariances
            .iter()
            .zip(&rec.trajectory.covariances)
            .map(|(r, s)| (r - s).norm() / s.norm().max(1e-8))
            .fold(0.0, f64::max);
        if check_tightness {
            if let Some(tol) = self.settings.replay_tolerance {
                if replay_deviation > tol {
                    return Err(Error::RelaxationGap(format!(
                        "replayed covariance deviates from program trajectory by {replay_deviation:.3e} (> {tol:.1e})"
                    )));
                }
            }
        }
        Ok(SteeringSolution {
            status: sol.status,
            law,
            trajectory: rec.trajectory,
            aux_u: rec.aux_u,
            aux_y: rec.aux_y,
            objective_value: sol.objective_value,
            replay,
            replay_deviation,
            pseudo_inverse_steps: rec.pseudo_inverse_steps,
        })
    }

    /// Minimum-cost steering from `initial` to `goal`. Returns
    /// [`Error::NotSolved`] when the program is infeasible (or unbounded /
    /// failed) and [`Error::RelaxationGap`] when the solver's answer does not
    /// survive exact replay.
    pub fn opt_steer(
        &self,
        initial: &GaussianBelief,
        goal: &GaussianBelief,
        horizon: usize,
        weights: &SteeringWeights,
        spectral_terminal: bool,
    ) -> Result<SteeringSolution> {
        let sp = self.build_opt_steer(initial, goal, horizon, weights, spectral_terminal)?;
        // Tightness of Y_k is only driven by a positive control weight.
        let tight = weights.r().iter().all(|r| linalg::min_eigenvalue(r).is_ok_and(|l| l > 0.0));
        self.solve_and_verify(&sp, goal, spectral_terminal, tight)
    }

    /// Maximal initial covariance at `mu_q` that can reach `target` in
    /// `horizon` steps, with its steering law.
    ///
    /// The maximal `λ_min` program leaves `Y_k` free above `U_k Σ_k⁻¹ U_kᵀ`,
    /// so the law is re-derived by a minimum-effort solve from the (slightly
    /// shrunk) maximal covariance, which makes the relaxation tight.
    pub fn max_covar(&self, mu_q: &DVector<f64>, target: &GaussianBelief, horizon: usize) -> Result<MaxCovarSolution> {
        let sp = self.build_max_covar(mu_q, target, horizon)?;
        let sol = self.solve_program(&sp)?;
        if !sol.status.has_solution() {
            return Err(Error::NotSolved(sol.status));
        }
        let lambda_min = sol.scalar(&sp.program, EPIGRAPH_T)? * sp.cov_scale;
        let sigma0 = linalg::symmetrize(&sol.matrix(&sp.program, &sigma_name(0))?) * sp.cov_scale;
        if linalg::min_eigenvalue(&sigma0)? <= 0.0 {
            return Err(Error::RecoveryFailed {
                step: 0,
                detail: "maximal covariance is not positive definite".into(),
            });
        }
        let sigma_max = sigma0 * (1.0 - self.settings.max_covar_shrink);
        let initial = GaussianBelief::new(mu_q.clone(), linalg::symmetrize(&sigma_max))?;
        let weights = SteeringWeights::control_effort(self.system.n(), self.system.m(), horizon);
        let steering = match self.opt_steer(&initial, target, horizon, &weights, true) {
            Ok(s) => s,
            Err(Error::NotSolved(_)) if sol.status != SolveStatus::Optimal => return Err(Error::NotSolved(sol.status)),
            Err(Error::NotSolved(st)) => {
                return Err(Error::RelaxationGap(format!("re-derivation from maximal covariance returned {st}")))
            }
            Err(e) => return Err(e),
        };
        let status = if sol.status == SolveStatus::Optimal && steering.status == SolveStatus::Optimal {
            SolveStatus::Optimal
        } else {
            SolveStatus::Inaccurate
        };
        Ok(MaxCovarSolution {
            status,
            sigma_max: initial.covariance().clone(),
            law: steering.law.clone(),
            lambda_min,
            steering,
        })
    }

    /// Whether some `steps`-long law steers `q` into `p` (spectral terminal)
    /// under the scene. Solver breakdowns count as `false`.
    pub fn feasible(&self, q: &GaussianBelief, p: &GaussianBelief, steps: usize) -> bool {
        let weights = SteeringWeights::zero(self.system.n(), self.system.m(), steps);
        match self.opt_steer(q, p, steps, &weights, true) {
            Ok(_) => true,
            Err(Error::NotSolved(SolveStatus::Infeasible)) => false,
            Err(e) => {
                log::warn!("feasibility check treated as infeasible: {e}");
                false
            }
        }
    }
}

/// Output of [`Steerer::recover_controller`].
#[derive(Debug, Clone)]
pub struct RecoveredController {
    pub law: AffineFeedbackLaw,
    pub trajectory: MomentTrajectory,
    pub aux_u: Vec<DMatrix<f64>>,
    pub aux_y: Vec<DMatrix<f64>>,
    pub pseudo_inverse_steps: Vec<usize>,
}

/// Normalizes covariance variables to the size of the target covariance.
fn covariance_scale(target: &GaussianBelief) -> f64 {
    let s = target.covariance().amax();
    if s > 0.0 && s.is_finite() {
        s
    } else {
        1.0
    }
}

/// `K = U Σ⁻¹` via Cholesky, falling back to a pseudo-inverse when `Σ` is
/// singular to within 1e-10 (relative). Errors when `U` has a component
/// outside the range of `Σ`.
fn gain_from_lifted(u: &DMatrix<f64>, sigma: &DMatrix<f64>) -> std::result::Result<(DMatrix<f64>, bool), String> {
    let scale = sigma.amax().max(1e-300);
    let lmin = linalg::min_eigenvalue(sigma).map_err(|e| e.to_string())?;
    if lmin > 1e-10 * scale {
        if let Some(ch) = sigma.clone().cholesky() {
            // K Σ = U  ⇔  Σ Kᵀ = Uᵀ
            return Ok((ch.solve(&u.transpose()).transpose(), false));
        }
    }
    let eig = nalgebra::SymmetricEigen::new(linalg::symmetrize(sigma));
    let cutoff = 1e-10 * scale;
    let inv_vals = eig.eigenvalues.map(|l| if l > cutoff { 1.0 / l } else { 0.0 });
    let pinv = &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();
    let k = u * &pinv;
    let residual = (&k * sigma - u).amax();
    if residual > 1e-6 * u.amax().max(1.0) {
        return Err(format!("U not in range of singular Σ (residual {residual:.3e}, λ_min {lmin:.3e})"));
    }
    Ok((k, true))
}

/// Removes a tiny terminal mean residual left by solver tolerances with the
/// minimum-norm correction of the feedforward terms. Corrections are only
/// applied when the residual is already small (≤ 1e-4).
fn polish_terminal_mean(
    system: &LinearGaussianSystem,
    initial: &GaussianBelief,
    law: AffineFeedbackLaw,
    goal: &GaussianBelief,
) -> Result<AffineFeedbackLaw> {
    let traj = moments::propagate(system, initial, &law)?;
    let err = goal.mean() - traj.final_mean();
    if err.norm() == 0.0 || err.norm() > 1e-4 {
        return Ok(law);
    }
    let (n, m, len) = (system.n(), system.m(), law.len());
    // μ_L = A^L μ_0 + Σ_k A^{L-1-k} B v_k
    let mut blocks = vec![DMatrix::zeros(n, m); len];
    let mut power = DMatrix::<f64>::identity(n, n);
    for k in (0..len).rev() {
        blocks[k] = &power * system.b();
        power = &power * system.a();
    }
    let mut reach = DMatrix::zeros(n, m * len);
    for (k, blk) in blocks.iter().enumerate() {
        reach.view_mut((0, k * m), (n, m)).copy_from(blk);
    }
    let gram = &reach * reach.transpose();
    let Some(ch) = gram.cholesky() else {
        return Ok(law);
    };
    let delta = reach.transpose() * ch.solve(&err);
    let steps = law
        .steps()
        .iter()
        .enumerate()
        .map(|(k, s)| FeedbackStep { k: s.k.clone(), v: &s.v + delta.rows(k * m, m) })
        .collect();
    Ok(AffineFeedbackLaw::from_parts(steps))
}

/// `s ≥ zᵀ W z` as the LMI `[[s, (Fᵀz)ᵀ], [Fᵀz, I]] ⪰ 0` with `W = F Fᵀ`;
/// returns `s`.
fn quadratic_epigraph(p: &mut ConicProgram, name: &str, z: &MatExpr, w: &DMatrix<f64>) -> AffineExpr {
    let f = linalg::psd_factor(w);
    let s = p.add_scalar(name);
    let fz = z.left_mul(&f.transpose());
    let r = fz.rows();
    let corner = MatExpr::from_fn(1, 1, |_, _| s.clone());
    p.add_psd(MatExpr::block2(&corner, &fz.transpose(), &fz, &MatExpr::constant(&DMatrix::identity(r, r))));
    s
}
