use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, NonnegativeConeT, PSDTriangleConeT, SolverStatus, SupportedConeT,
    ZeroConeT,
};

use super::{ConicBackend, ConicProgram, ConicSettings, ConicSolution, SolveStatus, SolverStats};

// pulls in the BLAS/LAPACK link for the PSD cone
extern crate openblas_src;

/// Default backend: Clarabel's homogeneous-embedding interior-point method.
#[derive(Debug, Clone, Copy, Default)]
pub struct ClarabelBackend;

/// Row-wise constraint data before conversion to column storage.
struct Rows {
    triplets: Vec<(usize, usize, f64)>,
    b: Vec<f64>,
}

impl Rows {
    fn push(&mut self, terms: &[(usize, f64)], scale: f64, rhs: f64) {
        let r = self.b.len();
        self.triplets.extend(terms.iter().map(|&(c, v)| (r, c, scale * v)));
        self.b.push(rhs);
    }
}

fn to_csc(nrows: usize, ncols: usize, mut triplets: Vec<(usize, usize, f64)>) -> CscMatrix<f64> {
    triplets.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
    let mut colptr = vec![0usize; ncols + 1];
    let mut rowval = Vec::with_capacity(triplets.len());
    let mut nzval: Vec<f64> = Vec::with_capacity(triplets.len());
    let mut last: Option<(usize, usize)> = None;
    for (r, c, v) in triplets {
        if last == Some((r, c)) {
            *nzval.last_mut().unwrap() += v;
            continue;
        }
        rowval.push(r);
        nzval.push(v);
        colptr[c + 1] += 1;
        last = Some((r, c));
    }
    for c in 0..ncols {
        colptr[c + 1] += colptr[c];
    }
    CscMatrix::new(nrows, ncols, colptr, rowval, nzval)
}

fn map_status(s: SolverStatus) -> SolveStatus {
    match s {
        SolverStatus::Solved => SolveStatus::Optimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => SolveStatus::Infeasible,
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SolveStatus::Unbounded,
        SolverStatus::AlmostSolved
        | SolverStatus::MaxIterations
        | SolverStatus::MaxTime
        | SolverStatus::InsufficientProgress => SolveStatus::Inaccurate,
        SolverStatus::NumericalError | SolverStatus::Unsolved | SolverStatus::CallbackTerminated => SolveStatus::Failed,
    }
}

impl ConicBackend for ClarabelBackend {
    fn name(&self) -> &'static str {
        "clarabel"
    }

    fn solve_validated(&self, program: &ConicProgram, settings: &ConicSettings) -> ConicSolution {
        let n = program.num_scalars();
        let mut rows = Rows { triplets: Vec::new(), b: Vec::new() };
        let mut cones: Vec<SupportedConeT<f64>> = Vec::new();

        // Ax + s = b with s in the cone; affine expr e(x) = a·x + c.
        let n_eq = program.eq_constraints().len();
        for e in program.eq_constraints() {
            rows.push(e.terms(), 1.0, -e.constant_term());
        }
        if n_eq > 0 {
            cones.push(ZeroConeT(n_eq));
        }
        let n_ineq = program.ineq_constraints().len();
        for e in program.ineq_constraints() {
            rows.push(e.terms(), 1.0, -e.constant_term());
        }
        if n_ineq > 0 {
            cones.push(NonnegativeConeT(n_ineq));
        }
        for m in program.psd_constraints() {
            // s = svec(M(x)) = b − A x, upper triangle column-major, off-diagonals × √2
            for (i, j, e) in m.upper_triangle() {
                let w = if i == j { 1.0 } else { std::f64::consts::SQRT_2 };
                rows.push(e.terms(), -w, w * e.constant_term());
            }
            cones.push(PSDTriangleConeT(m.rows()));
        }

        if rows.b.is_empty() {
            // Nothing constrains x: either x = 0 is optimal or the LP is unbounded.
            let stats = SolverStats { backend_status: "trivial".into(), ..Default::default() };
            if program.objective().is_constant() {
                let x = vec![0.0; n];
                return ConicSolution {
                    status: SolveStatus::Optimal,
                    values: ConicSolution::collect_values(program, &x),
                    objective_value: program.objective().constant_term(),
                    stats,
                };
            }
            return ConicSolution::without_point(SolveStatus::Unbounded, stats);
        }

        let m_rows = rows.b.len();
        let a = to_csc(m_rows, n, rows.triplets);
        let p = CscMatrix::<f64>::zeros((n, n));
        let mut q = vec![0.0; n];
        for &(i, c) in program.objective().terms() {
            q[i] += c;
        }

        let cfg = DefaultSettings::<f64> {
            verbose: settings.verbose,
            max_iter: settings.max_iter,
            tol_feas: settings.tol_feas,
            tol_gap_abs: settings.tol_gap_abs,
            tol_gap_rel: settings.tol_gap_rel,
            ..DefaultSettings::default()
        };
        let mut solver = match DefaultSolver::new(&p, &q, &a, &rows.b, &cones, cfg) {
            Ok(s) => s,
            Err(e) => {
                let stats = SolverStats { backend_status: format!("setup error: {e}"), ..Default::default() };
                return ConicSolution::without_point(SolveStatus::Failed, stats);
            }
        };
        solver.solve();

        let backend_status = solver.solution.status;
        let status = map_status(backend_status);
        let x = solver.solution.x.clone();
        let finite = x.iter().all(|v| v.is_finite());
        let mut stats = SolverStats {
            iterations: solver.info.iterations,
            primal_residual: solver.info.res_primal,
            dual_residual: solver.info.res_dual,
            gap: solver.info.gap_abs,
            primal_violation: f64::NAN,
            backend_status: format!("{backend_status:?}"),
        };
        if !status.has_solution() {
            return ConicSolution::without_point(status, stats);
        }
        if !finite {
            return ConicSolution::without_point(SolveStatus::Failed, stats);
        }
        stats.primal_violation = program.primal_violation(&x);
        ConicSolution {
            status,
            values: ConicSolution::collect_values(program, &x),
            objective_value: program.objective().eval(&x),
            stats,
        }
    }
}
