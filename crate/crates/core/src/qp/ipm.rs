//! Mehrotra predictor-corrector interior point iteration.

use nalgebra::{DMatrix, DVector};

use super::{ConflictRow, ConstraintRef, FeasibilityReport, QpOptions, QuadraticProgram};

const STEP_TO_BOUNDARY: f64 = 0.995;
const PRIMAL_REGULARIZATION: f64 = 1e-10;
const DUAL_REGULARIZATION: f64 = 1e-10;
const REFINEMENT_STEPS: usize = 2;
const DIVERGENCE_LIMIT: f64 = 1e13;

pub(super) struct Outcome {
    pub x: DVector<f64>,
    pub eq_duals: DVector<f64>,
    pub ineq_duals: DVector<f64>,
    pub lower_duals: DVector<f64>,
    pub upper_duals: DVector<f64>,
    pub converged: bool,
    pub diverged: bool,
    pub iterations: usize,
}

/// Problem view with fixed variables (`l = u`) moved into equality rows.
struct Prepared<'a> {
    qp: &'a QuadraticProgram,
    eq: DMatrix<f64>,
    eq_rhs: DVector<f64>,
    fixed: Vec<usize>,
    lower: DVector<f64>,
    upper: DVector<f64>,
    patterns: Vec<Vec<usize>>,
}

impl<'a> Prepared<'a> {
    fn new(qp: &'a QuadraticProgram) -> Self {
        let n = qp.num_variables();
        let mut lower = qp.lower().clone();
        let mut upper = qp.upper().clone();
        let fixed: Vec<usize> = (0..n)
            .filter(|&j| {
                let (l, u) = (lower[j], upper[j]);
                l.is_finite() && u.is_finite() && (u - l) <= 1e-13 * (1.0 + l.abs())
            })
            .collect();
        let me0 = qp.num_equalities();
        let mut eq = DMatrix::zeros(me0 + fixed.len(), n);
        let mut eq_rhs = DVector::zeros(me0 + fixed.len());
        eq.view_mut((0, 0), (me0, n)).copy_from(qp.eq_matrix());
        eq_rhs.rows_mut(0, me0).copy_from(qp.eq_rhs());
        for (r, &j) in fixed.iter().enumerate() {
            eq[(me0 + r, j)] = 1.0;
            eq_rhs[me0 + r] = lower[j];
            lower[j] = f64::NEG_INFINITY;
            upper[j] = f64::INFINITY;
        }
        let patterns = (0..qp.num_inequalities())
            .map(|k| {
                let mut cols: Vec<usize> = (0..n).filter(|&j| qp.ineq_matrix()[(k, j)] != 0.0).collect();
                for &(j, _) in &qp.ineq_quadratic()[k] {
                    if !cols.contains(&j) {
                        cols.push(j);
                    }
                }
                cols.sort_unstable();
                cols
            })
            .collect();
        Self {
            qp,
            eq,
            eq_rhs,
            fixed,
            lower,
            upper,
            patterns,
        }
    }
}

struct Direction {
    dx: DVector<f64>,
    dnu: DVector<f64>,
    ds: DVector<f64>,
    dmu: DVector<f64>,
    dzl: DVector<f64>,
    dzu: DVector<f64>,
}

pub(super) fn solve(qp: &QuadraticProgram, options: &QpOptions) -> Outcome {
    let prepared = Prepared::new(qp);
    let raw = iterate(&prepared, options);
    let n = qp.num_variables();
    let me0 = qp.num_equalities();
    let mut x = raw.x;
    let mut lower_duals = raw.zl;
    let mut upper_duals = raw.zu;
    for (r, &j) in prepared.fixed.iter().enumerate() {
        x[j] = qp.lower()[j];
        let nu = raw.nu[me0 + r];
        lower_duals[j] = nu.max(0.0);
        upper_duals[j] = (-nu).max(0.0);
    }
    debug_assert_eq!(lower_duals.len(), n);
    Outcome {
        x,
        eq_duals: raw.nu.rows(0, me0).into_owned(),
        ineq_duals: raw.mu,
        lower_duals,
        upper_duals,
        converged: raw.converged,
        diverged: raw.diverged,
        iterations: raw.iterations,
    }
}

pub(super) fn phase_one(qp: &QuadraticProgram, options: &QpOptions) -> FeasibilityReport {
    let n = qp.num_variables();
    let me = qp.num_equalities();
    let mi = qp.num_inequalities();
    let rows = mi + 2 * me;
    let mut a = DMatrix::zeros(rows, n + 1);
    let mut b = DVector::zeros(rows);
    a.view_mut((0, 0), (mi, n)).copy_from(qp.ineq_matrix());
    b.rows_mut(0, mi).copy_from(qp.ineq_rhs());
    for i in 0..me {
        for j in 0..n {
            a[(mi + 2 * i, j)] = qp.eq_matrix()[(i, j)];
            a[(mi + 2 * i + 1, j)] = -qp.eq_matrix()[(i, j)];
        }
        b[mi + 2 * i] = qp.eq_rhs()[i];
        b[mi + 2 * i + 1] = -qp.eq_rhs()[i];
    }
    for r in 0..rows {
        a[(r, n)] = -1.0;
    }
    let mut lower = DVector::zeros(n + 1);
    let mut upper = DVector::from_element(n + 1, f64::INFINITY);
    lower.rows_mut(0, n).copy_from(qp.lower());
    upper.rows_mut(0, n).copy_from(qp.upper());
    let mut c = DVector::zeros(n + 1);
    c[n] = 1.0;
    let mut aux = QuadraticProgram::new(DMatrix::zeros(n + 1, n + 1), c)
        .and_then(|p| p.with_inequalities(a, b))
        .and_then(|p| p.with_bounds(lower, upper))
        .expect("phase-one dimensions are consistent by construction");
    for (k, terms) in qp.ineq_quadratic().iter().enumerate() {
        for &(j, h) in terms {
            aux = aux
                .with_quadratic_term(k, j, h)
                .expect("phase-one quadratic terms mirror the source rows");
        }
    }
    let outcome = solve(&aux, options);
    let point = outcome.x.rows(0, n).into_owned();
    let max_violation = outcome.x[n].max(0.0);

    let mut weights: Vec<(ConstraintRef, f64)> = (0..mi).map(|k| (ConstraintRef::Inequality(k), outcome.ineq_duals[k])).collect();
    for i in 0..me {
        let w = outcome.ineq_duals[mi + 2 * i] + outcome.ineq_duals[mi + 2 * i + 1];
        weights.push((ConstraintRef::Equality(i), w));
    }
    let g = qp.ineq_values(&point);
    let e = qp.eq_matrix() * &point - qp.eq_rhs();
    let heaviest = weights.iter().map(|w| w.1).fold(0.0, f64::max);
    let mut conflict: Vec<ConflictRow> = weights
        .into_iter()
        .filter(|(_, w)| *w > 1e-6 * heaviest.max(1e-12) && *w > 1e-9)
        .map(|(constraint, weight)| ConflictRow {
            constraint,
            weight,
            violation: match constraint {
                ConstraintRef::Inequality(k) => g[k],
                ConstraintRef::Equality(i) => e[i].abs(),
            },
        })
        .collect();
    conflict.sort_by(|x, y| y.weight.total_cmp(&x.weight).then(x.constraint.cmp(&y.constraint)));
    FeasibilityReport {
        max_violation,
        point,
        conflict,
        converged: outcome.converged,
    }
}

struct Raw {
    x: DVector<f64>,
    nu: DVector<f64>,
    mu: DVector<f64>,
    zl: DVector<f64>,
    zu: DVector<f64>,
    converged: bool,
    diverged: bool,
    iterations: usize,
}

fn initial_point(lower: &DVector<f64>, upper: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(
        lower.len(),
        lower.iter().zip(upper.iter()).map(|(&l, &u)| match (l.is_finite(), u.is_finite()) {
            (true, true) => 0.5 * (l + u),
            (true, false) => {
                if l < -1.0 {
                    0.0
                } else {
                    l + 1.0
                }
            }
            (false, true) => {
                if u > 1.0 {
                    0.0
                } else {
                    u - 1.0
                }
            }
            (false, false) => 0.0,
        }),
    )
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>, idx: Option<&[usize]>) -> f64 {
    let mut alpha: f64 = 1.0;
    let mut visit = |i: usize| {
        if dv[i] < 0.0 {
            alpha = alpha.min(-v[i] / dv[i]);
        }
    };
    match idx {
        Some(list) => list.iter().copied().for_each(&mut visit),
        None => (0..v.len()).for_each(&mut visit),
    }
    alpha
}

fn slack_floor(gap: f64, bound: f64) -> f64 {
    gap.max(f64::EPSILON * f64::EPSILON * (1.0 + bound.abs()))
}

/// LU of the regularized Newton matrix, strengthening the shift until every pivot is usable.
fn factorize(m0: &DMatrix<f64>, n: usize, me: usize) -> Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    let scale = m0.amax().max(1.0);
    let mut primal = PRIMAL_REGULARIZATION;
    let mut dual = DUAL_REGULARIZATION;
    for attempt in 0..8 {
        if attempt > 0 {
            primal = primal.max(scale * 1e-15) * 100.0;
            dual = dual.max(scale * 1e-15) * 100.0;
        }
        let mut m = m0.clone();
        for j in 0..n {
            m[(j, j)] += primal;
        }
        for i in 0..me {
            m[(n + i, n + i)] -= dual;
        }
        let lu = m.lu();
        let pivots = lu.u().diagonal();
        if pivots.iter().all(|v| v.is_finite() && v.abs() > scale * f64::MIN_POSITIVE) {
            return Some(lu);
        }
    }
    None
}

fn iterate(p: &Prepared, options: &QpOptions) -> Raw {
    let qp = p.qp;
    let n = qp.num_variables();
    let me = p.eq.nrows();
    let mi = qp.num_inequalities();
    let lo: Vec<usize> = (0..n).filter(|&j| p.lower[j].is_finite()).collect();
    let up: Vec<usize> = (0..n).filter(|&j| p.upper[j].is_finite()).collect();
    let n_comp = mi + lo.len() + up.len();
    let tol = options.tolerance;

    let mut x = initial_point(&p.lower, &p.upper);
    let mut s = qp.ineq_values(&x).map(|v| (-v).max(1.0));
    let mut mu = DVector::from_element(mi, 1.0);
    let mut nu = DVector::zeros(me);
    let mut zl = DVector::zeros(n);
    let mut zu = DVector::zeros(n);
    for &j in &lo {
        zl[j] = 1.0;
    }
    for &j in &up {
        zu[j] = 1.0;
    }

    let mut converged = false;
    let mut diverged = false;
    let mut iterations = 0;
    for iter in 0..options.max_iterations {
        iterations = iter;
        let g = qp.ineq_values(&x);
        let jac = qp.ineq_jacobian(&x);
        let r_d = qp.hessian() * &x + qp.linear() - p.eq.tr_mul(&nu) + jac.tr_mul(&mu) - &zl + &zu;
        let r_e = &p.eq * &x - &p.eq_rhs;
        let r_g = &g + &s;

        let slack_l = DVector::from_iterator(
            n,
            (0..n).map(|j| {
                if p.lower[j].is_finite() {
                    slack_floor(x[j] - p.lower[j], p.lower[j])
                } else {
                    1.0
                }
            }),
        );
        let slack_u = DVector::from_iterator(
            n,
            (0..n).map(|j| {
                if p.upper[j].is_finite() {
                    slack_floor(p.upper[j] - x[j], p.upper[j])
                } else {
                    1.0
                }
            }),
        );

        let stationarity = r_d.amax();
        let primal = g.iter().fold(r_e.amax(), |acc, v| acc.max(*v));
        let mut complementarity: f64 = 0.0;
        for k in 0..mi {
            complementarity = complementarity.max((mu[k] * g[k]).abs());
        }
        for &j in &lo {
            complementarity = complementarity.max(zl[j] * slack_l[j]);
        }
        for &j in &up {
            complementarity = complementarity.max(zu[j] * slack_u[j]);
        }
        if stationarity <= tol && primal <= tol && complementarity <= tol {
            converged = true;
            break;
        }
        let biggest = x.amax().max(mu.amax()).max(nu.amax()).max(zl.amax()).max(zu.amax());
        if !biggest.is_finite() || biggest > DIVERGENCE_LIMIT {
            diverged = true;
            break;
        }

        let gap = if n_comp == 0 {
            0.0
        } else {
            (s.dot(&mu) + lo.iter().map(|&j| zl[j] * slack_l[j]).sum::<f64>() + up.iter().map(|&j| zu[j] * slack_u[j]).sum::<f64>())
                / n_comp as f64
        };

        // Augmented Newton matrix [K Eᵀ Jᵀ; E 0 0; J 0 −S/M] with K = W + Z_l/S_l + Z_u/S_u.
        let mut k = qp.hessian().clone();
        for (row, terms) in qp.ineq_quadratic().iter().enumerate() {
            for &(j, h) in terms {
                k[(j, j)] += 2.0 * h * mu[row];
            }
        }
        for &j in &lo {
            k[(j, j)] += zl[j] / slack_l[j];
        }
        for &j in &up {
            k[(j, j)] += zu[j] / slack_u[j];
        }

        let dim = n + me + mi;
        let mut m0 = DMatrix::zeros(dim, dim);
        m0.view_mut((0, 0), (n, n)).copy_from(&k);
        for i in 0..me {
            for j in 0..n {
                let v = p.eq[(i, j)];
                m0[(n + i, j)] = v;
                m0[(j, n + i)] = v;
            }
        }
        for row in 0..mi {
            let r = n + me + row;
            for &j in &p.patterns[row] {
                let v = jac[(row, j)];
                m0[(r, j)] = v;
                m0[(j, r)] = v;
            }
            m0[(r, r)] = -s[row] / mu[row];
        }
        let Some(lu) = factorize(&m0, n, me + mi) else {
            break;
        };

        let solve_direction = |rc_s: &DVector<f64>, rc_l: &DVector<f64>, rc_u: &DVector<f64>| -> Option<Direction> {
            let mut rhs1 = -&r_d;
            for &j in &lo {
                rhs1[j] += rc_l[j] / slack_l[j];
            }
            for &j in &up {
                rhs1[j] -= rc_u[j] / slack_u[j];
            }
            let mut rhs = DVector::zeros(dim);
            rhs.rows_mut(0, n).copy_from(&rhs1);
            rhs.rows_mut(n, me).copy_from(&(-&r_e));
            for row in 0..mi {
                rhs[n + me + row] = -(rc_s[row] + mu[row] * r_g[row]) / mu[row];
            }
            let mut sol = lu.solve(&rhs)?;
            for _ in 0..REFINEMENT_STEPS {
                let residual = &rhs - &m0 * &sol;
                if residual.amax() <= 1e-15 * (1.0 + rhs.amax()) {
                    break;
                }
                sol += lu.solve(&residual)?;
            }
            if sol.iter().any(|v| !v.is_finite()) {
                return None;
            }
            let dx = sol.rows(0, n).into_owned();
            let dnu = -sol.rows(n, me).into_owned();
            let jdx = &jac * &dx;
            let ds = -&r_g - &jdx;
            let dmu = sol.rows(n + me, mi).into_owned();
            let mut dzl = DVector::zeros(n);
            let mut dzu = DVector::zeros(n);
            for &j in &lo {
                dzl[j] = (rc_l[j] - zl[j] * dx[j]) / slack_l[j];
            }
            for &j in &up {
                dzu[j] = (rc_u[j] + zu[j] * dx[j]) / slack_u[j];
            }
            Some(Direction {
                dx,
                dnu,
                ds,
                dmu,
                dzl,
                dzu,
            })
        };

        let step_limit = |d: &Direction| -> f64 {
            let neg_dx = -&d.dx;
            max_step(&s, &d.ds, None)
                .min(max_step(&mu, &d.dmu, None))
                .min(max_step(&zl, &d.dzl, Some(&lo)))
                .min(max_step(&zu, &d.dzu, Some(&up)))
                .min(max_step(&slack_l, &d.dx, Some(&lo)))
                .min(max_step(&slack_u, &neg_dx, Some(&up)))
        };

        // Predictor.
        let rc_s = -s.component_mul(&mu);
        let rc_l = -slack_l.component_mul(&zl);
        let rc_u = -slack_u.component_mul(&zu);
        let Some(aff) = solve_direction(&rc_s, &rc_l, &rc_u) else {
            break;
        };
        let direction = if n_comp == 0 {
            aff
        } else {
            let alpha_aff = step_limit(&aff);
            let mut gap_aff = 0.0;
            for r in 0..mi {
                gap_aff += (s[r] + alpha_aff * aff.ds[r]) * (mu[r] + alpha_aff * aff.dmu[r]);
            }
            for &j in &lo {
                gap_aff += (slack_l[j] + alpha_aff * aff.dx[j]) * (zl[j] + alpha_aff * aff.dzl[j]);
            }
            for &j in &up {
                gap_aff += (slack_u[j] - alpha_aff * aff.dx[j]) * (zu[j] + alpha_aff * aff.dzu[j]);
            }
            gap_aff /= n_comp as f64;
            let sigma = if gap > 0.0 { (gap_aff / gap).powi(3).clamp(0.0, 1.0) } else { 0.0 };
            let target = sigma * gap;

            // Corrector with second-order terms.
            let mut rc_s = DVector::zeros(mi);
            for r in 0..mi {
                rc_s[r] = target - s[r] * mu[r] - aff.ds[r] * aff.dmu[r];
            }
            let mut rc_l = DVector::zeros(n);
            for &j in &lo {
                rc_l[j] = target - slack_l[j] * zl[j] - aff.dx[j] * aff.dzl[j];
            }
            let mut rc_u = DVector::zeros(n);
            for &j in &up {
                rc_u[j] = target - slack_u[j] * zu[j] + aff.dx[j] * aff.dzu[j];
            }
            match solve_direction(&rc_s, &rc_l, &rc_u) {
                Some(d) => d,
                None => break,
            }
        };

        let alpha = if n_comp == 0 {
            1.0
        } else {
            (STEP_TO_BOUNDARY * step_limit(&direction)).min(1.0)
        };
        x += alpha * &direction.dx;
        nu += alpha * &direction.dnu;
        s += alpha * &direction.ds;
        mu += alpha * &direction.dmu;
        zl += alpha * &direction.dzl;
        zu += alpha * &direction.dzu;
        iterations = iter + 1;
    }

    Raw {
        x,
        nu,
        mu,
        zl,
        zu,
        converged,
        diverged,
        iterations,
    }
}
