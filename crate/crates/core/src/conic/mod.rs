//! Solver-agnostic conic programs: a linear objective with affine equality,
//! inequality and PSD-cone constraints over named matrix/vector variables.
//!
//! [`solve`] validates a program and hands it to the default interior-point
//! backend ([`ClarabelBackend`]); other backends implement [`ConicBackend`].

mod clarabel_backend;
mod expr;

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use clarabel_backend::ClarabelBackend;
pub use expr::{AffineExpr, MatExpr};

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    /// Terminated with reduced accuracy; the point may still be usable.
    Inaccurate,
    Failed,
}

impl SolveStatus {
    /// Whether the returned point is worth recovering and verifying.
    pub fn has_solution(self) -> bool {
        matches!(self, SolveStatus::Optimal | SolveStatus::Inaccurate)
    }
}

impl fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::Unbounded => "unbounded",
            SolveStatus::Inaccurate => "inaccurate",
            SolveStatus::Failed => "failed",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VarShape {
    /// `dim × dim` symmetric matrix, stored as its upper triangle.
    Symmetric {
        dim: usize,
    },
    Dense {
        rows: usize,
        cols: usize,
    },
}

impl VarShape {
    pub fn scalar_count(self) -> usize {
        match self {
            VarShape::Symmetric { dim } => dim * (dim + 1) / 2,
            VarShape::Dense { rows, cols } => rows * cols,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub shape: VarShape,
    /// Index of the first scalar of this variable.
    pub offset: usize,
}

impl Variable {
    /// Scalar index of entry `(i, j)`.
    pub fn index(&self, i: usize, j: usize) -> usize {
        match self.shape {
            VarShape::Symmetric { dim } => {
                let (r, c) = (i.min(j), i.max(j));
                debug_assert!(c < dim);
                // upper triangle, column-major
                self.offset + c * (c + 1) / 2 + r
            }
            VarShape::Dense { cols, .. } => self.offset + i * cols + j,
        }
    }

    pub fn expr(&self) -> MatExpr {
        let (rows, cols) = match self.shape {
            VarShape::Symmetric { dim } => (dim, dim),
            VarShape::Dense { rows, cols } => (rows, cols),
        };
        MatExpr::from_fn(rows, cols, |i, j| AffineExpr::var(self.index(i, j)))
    }

    fn value(&self, x: &[f64]) -> Vec<f64> {
        x[self.offset..self.offset + self.shape.scalar_count()].to_vec()
    }
}

/// Linear objective (minimized) plus constraint lists.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConicProgram {
    variables: Vec<Variable>,
    num_scalars: usize,
    objective: AffineExpr,
    /// `expr = 0`
    eq_constraints: Vec<AffineExpr>,
    /// `expr ≤ 0`
    ineq_constraints: Vec<AffineExpr>,
    /// `expr ⪰ 0`
    psd_constraints: Vec<MatExpr>,
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    fn add_variable(&mut self, name: &str, shape: VarShape) -> MatExpr {
        assert!(self.variable(name).is_none(), "duplicate variable {name}");
        let var = Variable { name: name.to_owned(), shape, offset: self.num_scalars };
        self.num_scalars += shape.scalar_count();
        let e = var.expr();
        self.variables.push(var);
        e
    }

    pub fn add_symmetric(&mut self, name: &str, dim: usize) -> MatExpr {
        self.add_variable(name, VarShape::Symmetric { dim })
    }

    pub fn add_dense(&mut self, name: &str, rows: usize, cols: usize) -> MatExpr {
        self.add_variable(name, VarShape::Dense { rows, cols })
    }

    pub fn add_scalar(&mut self, name: &str) -> AffineExpr {
        self.add_dense(name, 1, 1).get(0, 0).clone()
    }

    pub fn variable(&self, name: &str) -> Option<&Variable> {
        self.variables.iter().find(|v| v.name == name)
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn num_scalars(&self) -> usize {
        self.num_scalars
    }

    pub fn minimize(&mut self, objective: AffineExpr) {
        self.objective = objective;
    }

    pub fn objective(&self) -> &AffineExpr {
        &self.objective
    }

    pub fn add_eq(&mut self, e: AffineExpr) {
        self.eq_constraints.push(e);
    }

    /// Entrywise `m = 0`; for a symmetric expression only the upper triangle
    /// is emitted so no equality is duplicated.
    pub fn add_matrix_eq(&mut self, m: &MatExpr) {
        if m.is_symmetric(1e-12) {
            let ups: Vec<_> = m.upper_triangle().map(|(_, _, e)| e.clone()).collect();
            self.eq_constraints.extend(ups);
        } else {
            self.eq_constraints.extend(m.entries().iter().cloned());
        }
    }

    pub fn add_ineq(&mut self, e: AffineExpr) {
        self.ineq_constraints.push(e);
    }

    pub fn add_psd(&mut self, m: MatExpr) {
        self.psd_constraints.push(m);
    }

    pub fn eq_constraints(&self) -> &[AffineExpr] {
        &self.eq_constraints
    }
    pub fn ineq_constraints(&self) -> &[AffineExpr] {
        &self.ineq_constraints
    }
    pub fn psd_constraints(&self) -> &[MatExpr] {
        &self.psd_constraints
    }

    /// Checks that every expression references declared scalars and every
    /// PSD expression is square and symmetric.
    pub fn validate(&self) -> Result<()> {
        let mut offset = 0;
        for v in &self.variables {
            if v.offset != offset {
                return Err(Error::invalid(format!("variable {} has inconsistent offset", v.name)));
            }
            offset += v.shape.scalar_count();
        }
        if offset != self.num_scalars {
            return Err(Error::invalid("scalar count does not match variable table"));
        }
        let in_range = |e: &AffineExpr| e.max_index().is_none_or(|i| i < self.num_scalars);
        let all_finite = |e: &AffineExpr| e.constant_term().is_finite() && e.terms().iter().all(|t| t.1.is_finite());
        let scalars = std::iter::once(&self.objective)
            .chain(&self.eq_constraints)
            .chain(&self.ineq_constraints)
            .chain(self.psd_constraints.iter().flat_map(|m| m.entries()));
        for e in scalars {
            if !in_range(e) {
                return Err(Error::invalid("expression references an undeclared scalar"));
            }
            if !all_finite(e) {
                return Err(Error::invalid("expression has non-finite coefficients"));
            }
        }
        for (k, m) in self.psd_constraints.iter().enumerate() {
            if !m.is_square() || m.rows() == 0 {
                return Err(Error::invalid(format!("PSD constraint {k} is not square")));
            }
            if !m.is_symmetric(1e-9) {
                return Err(Error::invalid(format!("PSD constraint {k} is not symmetric")));
            }
        }
        Ok(())
    }

    /// Largest violation of any constraint at `x`: `|eq|`, `max(ineq, 0)`,
    /// `max(−λ_min(psd), 0)`.
    pub fn primal_violation(&self, x: &[f64]) -> f64 {
        let eq = self.eq_constraints.iter().map(|e| e.eval(x).abs());
        let ineq = self.ineq_constraints.iter().map(|e| e.eval(x).max(0.0));
        let psd = self.psd_constraints.iter().map(|m| {
            let v = linalg::symmetrize(&m.eval(x));
            linalg::min_eigenvalue(&v).map_or(f64::INFINITY, |l| (-l).max(0.0))
        });
        eq.chain(ineq).chain(psd).fold(0.0, f64::max)
    }

    /// Largest constant magnitude over all constraints, used to scale the
    /// primal residual check.
    pub fn constraint_scale(&self) -> f64 {
        self.eq_constraints
            .iter()
            .chain(&self.ineq_constraints)
            .chain(self.psd_constraints.iter().flat_map(|m| m.entries()))
            .map(|e| e.constant_term().abs())
            .fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConicSettings {
    pub tol_feas: f64,
    pub tol_gap_abs: f64,
    pub tol_gap_rel: f64,
    pub max_iter: u32,
    /// Absolute primal violation (scaled by `1 + constraint_scale`) above
    /// which an `optimal` report is downgraded to `inaccurate`.
    pub residual_check: f64,
    pub verbose: bool,
}

impl Default for ConicSettings {
    fn default() -> Self {
        Self {
            tol_feas: 1e-8,
            tol_gap_abs: 1e-8,
            tol_gap_rel: 1e-8,
            max_iter: 200,
            residual_check: 1e-7,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub iterations: u32,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
    /// Violation of the original constraints recomputed at the returned point.
    pub primal_violation: f64,
    pub backend_status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConicSolution {
    pub status: SolveStatus,
    pub values: BTreeMap<String, Vec<f64>>,
    pub objective_value: f64,
    pub stats: SolverStats,
}

impl ConicSolution {
    pub(crate) fn without_point(status: SolveStatus, stats: SolverStats) -> Self {
        Self { status, values: BTreeMap::new(), objective_value: f64::NAN, stats }
    }

    fn raw(&self, program: &ConicProgram, name: &str) -> Result<(Variable, &[f64])> {
        let var = program.variable(name).ok_or_else(|| Error::invalid(format!("no variable named {name}")))?;
        let vals = self.values.get(name).ok_or_else(|| Error::invalid(format!("solution has no value for {name}")))?;
        Ok((var.clone(), vals))
    }

    /// Value of a matrix variable (symmetric variables are expanded).
    pub fn matrix(&self, program: &ConicProgram, name: &str) -> Result<DMatrix<f64>> {
        let (var, vals) = self.raw(program, name)?;
        let e = var.expr();
        Ok(DMatrix::from_fn(e.rows(), e.cols(), |i, j| vals[var.index(i, j) - var.offset]))
    }

    /// Value of a column (or row) variable as a vector.
    pub fn vector(&self, program: &ConicProgram, name: &str) -> Result<DVector<f64>> {
        let (_, vals) = self.raw(program, name)?;
        Ok(DVector::from_column_slice(vals))
    }

    pub fn scalar(&self, program: &ConicProgram, name: &str) -> Result<f64> {
        let (_, vals) = self.raw(program, name)?;
        vals.first().copied().ok_or_else(|| Error::invalid(format!("{name} is empty")))
    }

    pub(crate) fn collect_values(program: &ConicProgram, x: &[f64]) -> BTreeMap<String, Vec<f64>> {
        program.variables.iter().map(|v| (v.name.clone(), v.value(x))).collect()
    }
}

/// An interior-point (or other) conic solver wrapped to the program contract.
pub trait ConicBackend: Send + Sync {
    fn name(&self) -> &'static str;

    /// Solves a validated program. Numerical breakdown must be reported as
    /// [`SolveStatus::Failed`], never as a panic.
    fn solve_validated(&self, program: &ConicProgram, settings: &ConicSettings) -> ConicSolution;
}

/// Validates and solves with the default backend.
pub fn solve(program: &ConicProgram, settings: &ConicSettings) -> Result<ConicSolution> {
    solve_with(&ClarabelBackend, program, settings)
}

pub fn solve_with(
    backend: &dyn ConicBackend,
    program: &ConicProgram,
    settings: &ConicSettings,
) -> Result<ConicSolution> {
    program.validate()?;
    let mut sol = backend.solve_validated(program, settings);
    if sol.status == SolveStatus::Optimal {
        let tol = settings.residual_check * (1.0 + program.constraint_scale());
        if sol.stats.primal_violation > tol {
            log::debug!(
                "downgrading optimal to inaccurate: violation {:.3e} > {:.3e}",
                sol.stats.primal_violation,
                tol
            );
            sol.status = SolveStatus::Inaccurate;
        }
    }
    Ok(sol)
}
