//! Dense convex quadratic programming with Lagrange multipliers.
//!
//! The solver is a primal-dual interior point method with Mehrotra
//! predictor-corrector steps. Every returned solution carries KKT residuals
//! recomputed from the original problem data by [`kkt_residuals`], so callers
//! never have to trust solver internals.
//!
//! Sign conventions (stationarity):
//!
//! ```text
//! Qx + c − Eᵀν + Σₖ μₖ ∇gₖ(x) − z_l + z_u = 0,   μ, z_l, z_u ≥ 0
//! ```
//!
//! so an equality dual `ν` is the marginal cost of raising its right-hand side.

mod ipm;
mod program;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use program::QuadraticProgram;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    Dimension { what: &'static str, expected: usize, found: usize },
    #[error("objective matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotConvex { min_eigenvalue: f64 },
    #[error("objective matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("inequality row {row} has a negative quadratic coefficient {coefficient}")]
    NonConvexRow { row: usize, coefficient: f64 },
    #[error("variable {variable} has inconsistent bounds [{lower}, {upper}]")]
    InvalidBounds { variable: usize, lower: f64, upper: f64 },
    #[error("problem data contains non-finite values")]
    NonFinite,
    #[error("tolerance must be positive, got {0}")]
    Tolerance(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIterations,
}

/// Infinity-norm KKT residuals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity)
    }

    pub fn within(&self, tol: f64) -> bool {
        self.max() <= tol
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ConstraintRef {
    Equality(usize),
    Inequality(usize),
}

/// A constraint implicated in an infeasibility certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct ConflictRow {
    pub constraint: ConstraintRef,
    /// Multiplier of the row in the phase-one program; weights sum to one.
    pub weight: f64,
    /// Row violation at the least-violating point.
    pub violation: f64,
}

/// Result of minimizing the largest constraint violation.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityReport {
    pub max_violation: f64,
    pub point: DVector<f64>,
    /// Rows carrying positive phase-one multipliers, heaviest first.
    pub conflict: Vec<ConflictRow>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub eq_duals: DVector<f64>,
    pub ineq_duals: DVector<f64>,
    pub lower_duals: DVector<f64>,
    pub upper_duals: DVector<f64>,
    pub status: QpStatus,
    pub residuals: KktResiduals,
    pub objective: f64,
    pub iterations: usize,
    pub certificate: Option<FeasibilityReport>,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

/// Solves `qp` to absolute KKT tolerance `tol` with the default iteration cap.
pub fn solve_qp(qp: &QuadraticProgram, tol: f64) -> Result<QpSolution, QpError> {
    solve_qp_with(
        qp,
        &QpOptions {
            tolerance: tol,
            ..QpOptions::default()
        },
    )
}

pub fn solve_qp_with(qp: &QuadraticProgram, options: &QpOptions) -> Result<QpSolution, QpError> {
    if !(options.tolerance > 0.0) {
        return Err(QpError::Tolerance(options.tolerance));
    }
    qp.validate()?;
    let outcome = ipm::solve(qp, options);
    let mut solution = QpSolution {
        objective: qp.objective(&outcome.x),
        x: outcome.x,
        eq_duals: outcome.eq_duals,
        ineq_duals: outcome.ineq_duals,
        lower_duals: outcome.lower_duals,
        upper_duals: outcome.upper_duals,
        status: QpStatus::MaxIterations,
        residuals: KktResiduals {
            stationarity: f64::INFINITY,
            primal: f64::INFINITY,
            complementarity: f64::INFINITY,
        },
        iterations: outcome.iterations,
        certificate: None,
    };
    solution.residuals = kkt_residuals(qp, &solution)?;
    if outcome.converged && solution.residuals.within(options.tolerance) {
        solution.status = QpStatus::Optimal;
        return Ok(solution);
    }

    let report = minimize_max_violation(qp, options)?;
    let threshold = infeasibility_threshold(qp, options.tolerance);
    if report.max_violation > threshold {
        solution.status = QpStatus::Infeasible;
        solution.certificate = Some(report);
    } else if outcome.diverged || solution.x.amax() > 1e10 {
        solution.status = QpStatus::Unbounded;
    }
    Ok(solution)
}

/// Violation level above which a problem is declared infeasible.
pub fn infeasibility_threshold(qp: &QuadraticProgram, tol: f64) -> f64 {
    let scale = qp.eq_rhs().amax().max(qp.ineq_rhs().amax()).max(1.0);
    (100.0 * tol).max(1e-7) * scale
}

/// Re-evaluates the KKT conditions of `qp` at `sol` from the problem data.
///
/// Returns `(stationarity, primal feasibility, complementarity)` as
/// infinity norms. Complementarity is the largest `|multiplier · slack|`
/// over inequality rows and finite bounds.
pub fn kkt_residuals(qp: &QuadraticProgram, sol: &QpSolution) -> Result<KktResiduals, QpError> {
    let n = qp.num_variables();
    for (what, len, expected) in [
        ("primal vector", sol.x.len(), n),
        ("equality duals", sol.eq_duals.len(), qp.num_equalities()),
        ("inequality duals", sol.ineq_duals.len(), qp.num_inequalities()),
        ("lower bound duals", sol.lower_duals.len(), n),
        ("upper bound duals", sol.upper_duals.len(), n),
    ] {
        if len != expected {
            return Err(QpError::Dimension {
                what,
                expected,
                found: len,
            });
        }
    }
    let x = &sol.x;
    let g = qp.ineq_values(x);
    let jac = qp.ineq_jacobian(x);
    let grad = qp.hessian() * x + qp.linear() - qp.eq_matrix().tr_mul(&sol.eq_duals) + jac.tr_mul(&sol.ineq_duals) - &sol.lower_duals
        + &sol.upper_duals;
    let stationarity = grad.amax();

    let mut primal: f64 = (qp.eq_matrix() * x - qp.eq_rhs()).amax();
    primal = g.iter().fold(primal, |acc, v| acc.max(*v));
    let mut complementarity: f64 = 0.0;
    for k in 0..g.len() {
        complementarity = complementarity.max((sol.ineq_duals[k] * g[k]).abs());
        complementarity = complementarity.max(-sol.ineq_duals[k]);
    }
    for j in 0..n {
        let (l, u) = (qp.lower()[j], qp.upper()[j]);
        if l.is_finite() {
            primal = primal.max(l - x[j]);
            complementarity = complementarity.max((sol.lower_duals[j] * (x[j] - l)).abs());
        } else {
            complementarity = complementarity.max(sol.lower_duals[j].abs());
        }
        if u.is_finite() {
            primal = primal.max(x[j] - u);
            complementarity = complementarity.max((sol.upper_duals[j] * (u - x[j])).abs());
        } else {
            complementarity = complementarity.max(sol.upper_duals[j].abs());
        }
        complementarity = complementarity.max(-sol.lower_duals[j]).max(-sol.upper_duals[j]);
    }
    Ok(KktResiduals {
        stationarity,
        primal: primal.max(0.0),
        complementarity,
    })
}

/// Lagrangian dual objective evaluated at the multipliers of `sol`.
///
/// Uses the closed form valid under stationarity:
/// `−½xᵀQx − ½Σₖ μₖ xᵀHₖx + fᵀν − bᵀμ + lᵀz_l − uᵀz_u`.
pub fn dual_objective(qp: &QuadraticProgram, sol: &QpSolution) -> f64 {
    let x = &sol.x;
    let mut value = -0.5 * x.dot(&(qp.hessian() * x)) + qp.eq_rhs().dot(&sol.eq_duals) - qp.ineq_rhs().dot(&sol.ineq_duals);
    for (k, terms) in qp.ineq_quadratic().iter().enumerate() {
        for &(j, h) in terms {
            value -= sol.ineq_duals[k] * h * x[j] * x[j];
        }
    }
    for j in 0..qp.num_variables() {
        if qp.lower()[j].is_finite() {
            value += qp.lower()[j] * sol.lower_duals[j];
        }
        if qp.upper()[j].is_finite() {
            value -= qp.upper()[j] * sol.upper_duals[j];
        }
    }
    value
}

/// Phase-one program: minimize `t ≥ 0` such that every inequality row is
/// at most `t` and every equality row is within `±t`, keeping variable
/// bounds hard. Always feasible when the bounds are consistent.
pub fn minimize_max_violation(qp: &QuadraticProgram, options: &QpOptions) -> Result<FeasibilityReport, QpError> {
    qp.validate()?;
    let outcome = ipm::phase_one(qp, options);
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector, DMatrix};

    fn x_squared_above_one() -> QuadraticProgram {
        QuadraticProgram::new(dmatrix![2.0], dvector![0.0])
            .unwrap()
            .with_inequalities(dmatrix![-1.0], dvector![-1.0])
            .unwrap()
    }

    #[test]
    fn single_variable_lower_bound() {
        let qp = x_squared_above_one();
        let sol = solve_qp(&qp, 1e-8).unwrap();
        assert!(sol.is_optimal());
        assert!((sol.x[0] - 1.0).abs() < 1e-7);
        assert!((sol.ineq_duals[0] - 2.0).abs() < 1e-7);
    }

    #[test]
    fn symmetric_equality() {
        let qp = QuadraticProgram::new(DMatrix::identity(2, 2), dvector![0.0, 0.0])
            .unwrap()
            .with_equalities(dmatrix![1.0, 1.0], dvector![2.0])
            .unwrap();
        let sol = solve_qp(&qp, 1e-8).unwrap();
        assert!(sol.is_optimal());
        assert!((sol.x[0] - 1.0).abs() < 1e-8 && (sol.x[1] - 1.0).abs() < 1e-8);
        assert!((sol.eq_duals[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn exact_solution_has_zero_residuals() {
        let qp = x_squared_above_one();
        let sol = QpSolution {
            x: dvector![1.0],
            eq_duals: dvector![],
            ineq_duals: dvector![2.0],
            lower_duals: dvector![0.0],
            upper_duals: dvector![0.0],
            status: QpStatus::Optimal,
            residuals: KktResiduals {
                stationarity: 0.0,
                primal: 0.0,
                complementarity: 0.0,
            },
            objective: 1.0,
            iterations: 0,
            certificate: None,
        };
        let r = kkt_residuals(&qp, &sol).unwrap();
        assert_eq!((r.stationarity, r.primal, r.complementarity), (0.0, 0.0, 0.0));

        let mut perturbed = sol.clone();
        perturbed.x[0] += 1e-3;
        let r = kkt_residuals(&qp, &perturbed).unwrap();
        assert_eq!(r.primal, 0.0);
        assert!((r.stationarity - 2e-3).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_psd() {
        let qp = QuadraticProgram::new(dmatrix![1.0, 0.0; 0.0, -1.0], dvector![0.0, 0.0]).unwrap();
        assert!(matches!(solve_qp(&qp, 1e-8), Err(QpError::NotConvex { .. })));
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let err = QuadraticProgram::new(DMatrix::identity(2, 2), dvector![0.0, 0.0])
            .unwrap()
            .with_inequalities(dmatrix![1.0, 1.0], dvector![1.0, 2.0])
            .unwrap_err();
        assert!(matches!(err, QpError::Dimension { .. }));
        assert!(QuadraticProgram::new(DMatrix::identity(3, 3), dvector![0.0]).is_err());
    }

    #[test]
    fn rejects_negative_quadratic_row() {
        let qp = QuadraticProgram::new(dmatrix![0.0], dvector![1.0])
            .unwrap()
            .with_inequalities(dmatrix![1.0], dvector![1.0])
            .unwrap()
            .with_quadratic_term(0, 0, -1.0)
            .unwrap();
        assert!(matches!(qp.validate(), Err(QpError::NonConvexRow { .. })));
    }

    #[test]
    fn detects_infeasibility_with_certificate() {
        // x ≤ 1 and x ≥ 3
        let qp = QuadraticProgram::new(dmatrix![1.0], dvector![0.0])
            .unwrap()
            .with_inequalities(dmatrix![1.0; -1.0], dvector![1.0, -3.0])
            .unwrap();
        let sol = solve_qp(&qp, 1e-8).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
        let cert = sol.certificate.unwrap();
        assert!((cert.max_violation - 1.0).abs() < 1e-6);
        let rows: Vec<_> = cert.conflict.iter().map(|c| c.constraint).collect();
        assert!(rows.contains(&ConstraintRef::Inequality(0)));
        assert!(rows.contains(&ConstraintRef::Inequality(1)));
    }

    #[test]
    fn detects_unbounded() {
        let qp = QuadraticProgram::new(dmatrix![0.0], dvector![1.0]).unwrap();
        let sol = solve_qp(&qp, 1e-8).unwrap();
        assert_eq!(sol.status, QpStatus::Unbounded);
    }

    #[test]
    fn fixed_variables_and_bounds() {
        // min (x-3)² + (y+1)² with x fixed at 2, y ∈ [0, 5]
        let qp = QuadraticProgram::new(DMatrix::identity(2, 2) * 2.0, dvector![-6.0, 2.0])
            .unwrap()
            .with_bounds(dvector![2.0, 0.0], dvector![2.0, 5.0])
            .unwrap();
        let sol = solve_qp(&qp, 1e-8).unwrap();
        assert!(sol.is_optimal(), "{:?}", sol.status);
        assert!((sol.x[0] - 2.0).abs() < 1e-9);
        assert!(sol.x[1].abs() < 1e-8);
        // d/dx = 2·2 − 6 = −2 → upper dual 2 at the fixed value
        assert!((sol.upper_duals[0] - 2.0).abs() < 1e-7);
        assert!((sol.lower_duals[1] - 2.0).abs() < 1e-7);
    }

    #[test]
    fn quadratic_inequality_row() {
        // min −x s.t. x² ≤ 4 → x = 2, μ = 1/4
        let qp = QuadraticProgram::new(dmatrix![0.0], dvector![-1.0])
            .unwrap()
            .with_inequalities(dmatrix![0.0], dvector![4.0])
            .unwrap()
            .with_quadratic_term(0, 0, 1.0)
            .unwrap();
        let sol = solve_qp(&qp, 1e-8).unwrap();
        assert!(sol.is_optimal());
        assert!((sol.x[0] - 2.0).abs() < 1e-7);
        assert!((sol.ineq_duals[0] - 0.25).abs() < 1e-7);
    }

    #[test]
    fn rejects_non_positive_tolerance() {
        assert!(matches!(solve_qp(&x_squared_above_one(), 0.0), Err(QpError::Tolerance(_))));
    }
}
