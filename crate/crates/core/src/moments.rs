//! Exact first/second moment propagation under affine feedback and the
//! deterministic form of the halfspace chance constraints.

use libm::erfc;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, PSD_TOL};
use crate::serde_mat;
use crate::types::{AffineFeedbackLaw, GaussianBelief, HalfspaceChanceConstraint, LinearGaussianSystem, PlanningScene};

/// Pass tolerance on chance-constraint margins and on the terminal
/// covariance test when replaying a law.
pub const MARGIN_TOL: f64 = 1e-7;
/// Pass tolerance on the terminal mean error.
pub const MEAN_TOL: f64 = 1e-6;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Inverse of the standard normal CDF.
///
/// Rational approximation (Acklam) with one Halley correction against
/// `erfc`, giving close to full double precision over (0, 1).
pub fn normal_inverse_cdf(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("probability {p} outside (0, 1)")));
    }
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00, 3.754408661907416e+00];
    const P_LOW: f64 = 0.02425;

    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let x = if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    };

    let e = normal_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    Ok(x - u / (1.0 + 0.5 * x * u))
}

/// `Φ⁻¹(1 − ε)`; `+∞` for a hard constraint (`ε = 0`).
pub fn chance_quantile(epsilon: f64) -> f64 {
    if epsilon <= 0.0 {
        f64::INFINITY
    } else {
        // ε ∈ (0, 0.5] so 1 − ε ∈ [0.5, 1)
        normal_inverse_cdf(1.0 - epsilon).unwrap_or(f64::INFINITY)
    }
}

/// `quantile · √variance + offset`, with `∞ · 0 = 0` for hard constraints.
fn quantile_margin(quantile: f64, variance: f64, offset: f64) -> f64 {
    let std = variance.max(0.0).sqrt();
    if std == 0.0 {
        offset
    } else {
        quantile * std + offset
    }
}

/// Means and covariances `μ_0..μ_L`, `Σ_0..Σ_L` of an `L`-step maneuver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentTrajectory {
    #[serde(with = "serde_mat::vectors")]
    pub means: Vec<DVector<f64>>,
    #[serde(with = "serde_mat::matrices")]
    pub covariances: Vec<DMatrix<f64>>,
}

impl MomentTrajectory {
    pub fn len(&self) -> usize {
        self.means.len()
    }
    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }
    pub fn final_mean(&self) -> &DVector<f64> {
        self.means.last().expect("trajectory is never empty")
    }
    pub fn final_covariance(&self) -> &DMatrix<f64> {
        self.covariances.last().expect("trajectory is never empty")
    }

    /// Largest relative Frobenius distance between matching covariances.
    pub fn max_covariance_deviation(&self, other: &MomentTrajectory) -> f64 {
        self.covariances
            .iter()
            .zip(&other.covariances)
            .map(|(a, b)| linalg::relative_frobenius(a, b, 1e-12))
            .fold(0.0, f64::max)
    }
}

fn check_law_dims(system: &LinearGaussianSystem, law: &AffineFeedbackLaw) -> Result<()> {
    if law.input_dim() != system.m() || law.state_dim() != system.n() {
        return Err(Error::invalid(format!(
            "law gains are {}x{} but system has (n, m) = ({}, {})",
            law.input_dim(),
            law.state_dim(),
            system.n(),
            system.m()
        )));
    }
    Ok(())
}

/// Propagates `μ' = Aμ + Bv`, `Σ' = (A+BK)Σ(A+BK)ᵀ + DDᵀ` through every step.
pub fn propagate(
    system: &LinearGaussianSystem,
    initial: &GaussianBelief,
    law: &AffineFeedbackLaw,
) -> Result<MomentTrajectory> {
    if initial.dim() != system.n() {
        return Err(Error::invalid(format!("initial belief has dim {} but n = {}", initial.dim(), system.n())));
    }
    check_law_dims(system, law)?;
    let noise = system.noise_covariance();
    let mut means = Vec::with_capacity(law.len() + 1);
    let mut covariances = Vec::with_capacity(law.len() + 1);
    means.push(initial.mean().clone());
    covariances.push(initial.covariance().clone());
    for step in law.steps() {
        let mu = means.last().unwrap();
        let sigma = covariances.last().unwrap();
        let closed = system.a() + system.b() * &step.k;
        let next_sigma = linalg::symmetrize(&(&closed * sigma * closed.transpose() + &noise));
        let next_mu = system.a() * mu + system.b() * &step.v;
        means.push(next_mu);
        covariances.push(next_sigma);
    }
    Ok(MomentTrajectory { means, covariances })
}

/// Left-hand side of `Φ⁻¹(1−ε)√(αᵀΣα) + αᵀμ − β ≤ 0`.
pub fn state_chance_margin(mu: &DVector<f64>, sigma: &DMatrix<f64>, c: &HalfspaceChanceConstraint) -> Result<f64> {
    let n = c.dim();
    if mu.len() != n || sigma.shape() != (n, n) {
        return Err(Error::invalid(format!(
            "state constraint of dim {n} applied to mean {} / covariance {:?}",
            mu.len(),
            sigma.shape()
        )));
    }
    let alpha = c.alpha();
    let variance = alpha.dot(&(sigma * alpha));
    Ok(quantile_margin(chance_quantile(c.epsilon()), variance, alpha.dot(mu) - c.beta()))
}

/// Left-hand side of `Φ⁻¹(1−ε)√(αᵀKΣKᵀα) + αᵀv − β ≤ 0`.
pub fn control_chance_margin(
    k: &DMatrix<f64>,
    v: &DVector<f64>,
    sigma: &DMatrix<f64>,
    c: &HalfspaceChanceConstraint,
) -> Result<f64> {
    let m = c.dim();
    if k.nrows() != m || v.len() != m || sigma.shape() != (k.ncols(), k.ncols()) {
        return Err(Error::invalid(format!(
            "control constraint of dim {m} applied to K {:?}, v {}, covariance {:?}",
            k.shape(),
            v.len(),
            sigma.shape()
        )));
    }
    let ka = k.transpose() * c.alpha();
    let variance = ka.dot(&(sigma * &ka));
    Ok(quantile_margin(chance_quantile(c.epsilon()), variance, c.alpha().dot(v) - c.beta()))
}

/// Margins for one time step of a maneuver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMargins {
    pub step: usize,
    pub state: Vec<f64>,
    pub control: Vec<f64>,
}

/// Outcome of replaying a law from an initial belief against a scene and goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManeuverReport {
    pub pass: bool,
    pub mean_error: f64,
    pub terminal_ok: bool,
    /// `λ_max(Σ_L) − λ_min(Σ_goal)` in spectral mode, `−λ_min(Σ_goal − Σ_L)` otherwise.
    pub terminal_margin: f64,
    pub worst_state_margin: f64,
    pub worst_control_margin: f64,
    pub per_step: Vec<StepMargins>,
}

/// Replays `law` from `initial` and checks every chance constraint at steps
/// `0..L`, the terminal mean, and the terminal covariance.
///
/// With `spectral_terminal` the covariance test is `λ_max(Σ_L) ≤ λ_min(Σ_goal)`,
/// otherwise the Loewner test `Σ_L ⪯ Σ_goal`.
pub fn check_maneuver(
    system: &LinearGaussianSystem,
    initial: &GaussianBelief,
    law: &AffineFeedbackLaw,
    scene: &PlanningScene,
    goal: &GaussianBelief,
    spectral_terminal: bool,
) -> Result<ManeuverReport> {
    scene.check_dims(system)?;
    if goal.dim() != system.n() {
        return Err(Error::invalid("goal dimension does not match system"));
    }
    let traj = propagate(system, initial, law)?;
    let mut per_step = Vec::with_capacity(law.len());
    let mut worst_state = f64::NEG_INFINITY;
    let mut worst_control = f64::NEG_INFINITY;
    for (k, step) in law.steps().iter().enumerate() {
        let state = scene
            .state_constraints()
            .iter()
            .map(|c| state_chance_margin(&traj.means[k], &traj.covariances[k], c))
            .collect::<Result<Vec<_>>>()?;
        let control = scene
            .control_constraints()
            .iter()
            .map(|c| control_chance_margin(&step.k, &step.v, &traj.covariances[k], c))
            .collect::<Result<Vec<_>>>()?;
        worst_state = state.iter().copied().fold(worst_state, f64::max);
        worst_control = control.iter().copied().fold(worst_control, f64::max);
        per_step.push(StepMargins { step: k, state, control });
    }
    let mean_error = (traj.final_mean() - goal.mean()).norm();
    let terminal_margin = if spectral_terminal {
        linalg::max_eigenvalue(traj.final_covariance())? - linalg::min_eigenvalue(goal.covariance())?
    } else {
        -linalg::min_eigenvalue(&(goal.covariance() - traj.final_covariance()))?
    };
    let terminal_ok = terminal_margin <= MARGIN_TOL;
    let margins_ok = worst_state <= MARGIN_TOL && worst_control <= MARGIN_TOL;
    Ok(ManeuverReport {
        pass: terminal_ok && margins_ok && mean_error <= MEAN_TOL,
        mean_error,
        terminal_ok,
        terminal_margin,
        worst_state_margin: worst_state,
        worst_control_margin: worst_control,
        per_step,
    })
}

/// True iff every covariance in the trajectory is PSD within tolerance.
pub fn trajectory_is_psd(traj: &MomentTrajectory) -> Result<bool> {
    for s in &traj.covariances {
        if linalg::min_eigenvalue(s)? < -PSD_TOL {
            return Ok(false);
        }
    }
    Ok(true)
}
