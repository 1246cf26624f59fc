use nalgebra::{DMatrix, DVector};

use super::QpError;

/// Relative eigenvalue slack allowed when checking the objective for convexity.
const PSD_RELATIVE_TOL: f64 = 1e-9;

/// A dense convex quadratic program
///
/// ```text
/// minimize    ½ xᵀQx + cᵀx
/// subject to  E x = f
///             A x + Σⱼ hₖⱼ xⱼ² ≤ b      (hₖⱼ ≥ 0, one row per k)
///             l ≤ x ≤ u                 (entries may be infinite)
/// ```
///
/// The optional diagonal quadratic terms on inequality rows let callers
/// express convex constraints such as `a·u² + b·u − w ≤ 0` without leaving
/// the QP layer.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProgram {
    hessian: DMatrix<f64>,
    linear: DVector<f64>,
    eq_matrix: DMatrix<f64>,
    eq_rhs: DVector<f64>,
    ineq_matrix: DMatrix<f64>,
    ineq_rhs: DVector<f64>,
    ineq_quadratic: Vec<Vec<(usize, f64)>>,
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl QuadraticProgram {
    /// Unconstrained program over `linear.len()` variables.
    pub fn new(hessian: DMatrix<f64>, linear: DVector<f64>) -> Result<Self, QpError> {
        let n = linear.len();
        if hessian.nrows() != n || hessian.ncols() != n {
            return Err(QpError::Dimension {
                what: "objective matrix",
                expected: n,
                found: if hessian.nrows() != n { hessian.nrows() } else { hessian.ncols() },
            });
        }
        Ok(Self {
            hessian,
            linear,
            eq_matrix: DMatrix::zeros(0, n),
            eq_rhs: DVector::zeros(0),
            ineq_matrix: DMatrix::zeros(0, n),
            ineq_rhs: DVector::zeros(0),
            ineq_quadratic: Vec::new(),
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
        })
    }

    pub fn with_equalities(mut self, matrix: DMatrix<f64>, rhs: DVector<f64>) -> Result<Self, QpError> {
        check_rows("equality", &matrix, &rhs, self.num_variables())?;
        self.eq_matrix = matrix;
        self.eq_rhs = rhs;
        Ok(self)
    }

    pub fn with_inequalities(mut self, matrix: DMatrix<f64>, rhs: DVector<f64>) -> Result<Self, QpError> {
        check_rows("inequality", &matrix, &rhs, self.num_variables())?;
        self.ineq_quadratic = vec![Vec::new(); rhs.len()];
        self.ineq_matrix = matrix;
        self.ineq_rhs = rhs;
        Ok(self)
    }

    pub fn with_bounds(mut self, lower: DVector<f64>, upper: DVector<f64>) -> Result<Self, QpError> {
        let n = self.num_variables();
        for (what, v) in [("lower bound", &lower), ("upper bound", &upper)] {
            if v.len() != n {
                return Err(QpError::Dimension {
                    what,
                    expected: n,
                    found: v.len(),
                });
            }
        }
        self.lower = lower;
        self.upper = upper;
        Ok(self)
    }

    /// Adds `coefficient · x[variable]²` to the left-hand side of inequality `row`.
    pub fn with_quadratic_term(mut self, row: usize, variable: usize, coefficient: f64) -> Result<Self, QpError> {
        if row >= self.num_inequalities() {
            return Err(QpError::Dimension {
                what: "quadratic term row",
                expected: self.num_inequalities(),
                found: row,
            });
        }
        if variable >= self.num_variables() {
            return Err(QpError::Dimension {
                what: "quadratic term variable",
                expected: self.num_variables(),
                found: variable,
            });
        }
        self.ineq_quadratic[row].push((variable, coefficient));
        Ok(self)
    }

    pub fn num_variables(&self) -> usize {
        self.linear.len()
    }

    pub fn num_equalities(&self) -> usize {
        self.eq_rhs.len()
    }

    pub fn num_inequalities(&self) -> usize {
        self.ineq_rhs.len()
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    pub fn linear(&self) -> &DVector<f64> {
        &self.linear
    }

    pub fn eq_matrix(&self) -> &DMatrix<f64> {
        &self.eq_matrix
    }

    pub fn eq_rhs(&self) -> &DVector<f64> {
        &self.eq_rhs
    }

    pub fn ineq_matrix(&self) -> &DMatrix<f64> {
        &self.ineq_matrix
    }

    pub fn ineq_rhs(&self) -> &DVector<f64> {
        &self.ineq_rhs
    }

    pub fn ineq_quadratic(&self) -> &[Vec<(usize, f64)>] {
        &self.ineq_quadratic
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn has_quadratic_rows(&self) -> bool {
        self.ineq_quadratic.iter().any(|r| !r.is_empty())
    }

    /// Checks convexity and bound consistency.
    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.num_variables();
        for j in 0..n {
            if self.lower[j] > self.upper[j] || self.lower[j].is_nan() || self.upper[j].is_nan() {
                return Err(QpError::InvalidBounds {
                    variable: j,
                    lower: self.lower[j],
                    upper: self.upper[j],
                });
            }
            if self.lower[j] == f64::INFINITY || self.upper[j] == f64::NEG_INFINITY {
                return Err(QpError::InvalidBounds {
                    variable: j,
                    lower: self.lower[j],
                    upper: self.upper[j],
                });
            }
        }
        for (row, terms) in self.ineq_quadratic.iter().enumerate() {
            for &(_, coefficient) in terms {
                if !(coefficient >= 0.0) {
                    return Err(QpError::NonConvexRow { row, coefficient });
                }
            }
        }
        let finite = self.hessian.iter().all(|v| v.is_finite())
            && self.linear.iter().all(|v| v.is_finite())
            && self.eq_matrix.iter().chain(self.eq_rhs.iter()).all(|v| v.is_finite())
            && self.ineq_matrix.iter().chain(self.ineq_rhs.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(QpError::NonFinite);
        }
        let asym = (&self.hessian - self.hessian.transpose()).amax();
        let scale = self.hessian.amax();
        if asym > 1e-12 * (1.0 + scale) {
            return Err(QpError::NotSymmetric { asymmetry: asym });
        }
        let min_eig = min_eigenvalue(&self.hessian);
        if min_eig < -PSD_RELATIVE_TOL * scale.max(f64::MIN_POSITIVE) {
            return Err(QpError::NotConvex { min_eigenvalue: min_eig });
        }
        Ok(())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.linear.dot(x)
    }

    /// Inequality left-hand sides minus right-hand sides; feasible rows are ≤ 0.
    pub fn ineq_values(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = &self.ineq_matrix * x - &self.ineq_rhs;
        for (k, terms) in self.ineq_quadratic.iter().enumerate() {
            for &(j, h) in terms {
                g[k] += h * x[j] * x[j];
            }
        }
        g
    }

    /// Jacobian of [`Self::ineq_values`] at `x`.
    pub fn ineq_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut jac = self.ineq_matrix.clone();
        for (k, terms) in self.ineq_quadratic.iter().enumerate() {
            for &(j, h) in terms {
                jac[(k, j)] += 2.0 * h * x[j];
            }
        }
        jac
    }
}

fn check_rows(what: &'static str, matrix: &DMatrix<f64>, rhs: &DVector<f64>, n: usize) -> Result<(), QpError> {
    if matrix.ncols() != n {
        return Err(QpError::Dimension {
            what,
            expected: n,
            found: matrix.ncols(),
        });
    }
    if matrix.nrows() != rhs.len() {
        return Err(QpError::Dimension {
            what,
            expected: matrix.nrows(),
            found: rhs.len(),
        });
    }
    Ok(())
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let off_diagonal = m
        .row_iter()
        .enumerate()
        .any(|(i, row)| row.iter().enumerate().any(|(j, v)| i != j && *v != 0.0));
    if !off_diagonal {
        return m.diagonal().min();
    }
    m.clone().symmetric_eigenvalues().min()
}
