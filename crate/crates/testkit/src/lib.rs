//! Random case generators and independent oracles shared by the test suites.

#![allow(clippy::needless_range_loop)]

pub mod cases;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use storage_rights::grid::GridModel;
use storage_rights::qp::QuadraticProgram;

/// Dense Gaussian elimination with partial pivoting. Returns `None` when the
/// system is numerically singular.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-11 * scale {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Some(x)
}

/// Plain-data QP used by the enumeration oracle: min ½xᵀQx + cᵀx,
/// E x = f, A x ≤ b.
#[derive(Debug, Clone)]
pub struct DenseQp {
    pub q: Vec<Vec<f64>>,
    pub c: Vec<f64>,
    pub e: Vec<Vec<f64>>,
    pub f: Vec<f64>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl DenseQp {
    pub fn objective(&self, x: &[f64]) -> f64 {
        let n = x.len();
        let mut v = 0.0;
        for i in 0..n {
            v += self.c[i] * x[i];
            for j in 0..n {
                v += 0.5 * x[i] * self.q[i][j] * x[j];
            }
        }
        v
    }

    pub fn to_program(&self) -> QuadraticProgram {
        let n = self.c.len();
        let mat = |rows: &Vec<Vec<f64>>| DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]);
        QuadraticProgram::new(DMatrix::from_fn(n, n, |i, j| self.q[i][j]), DVector::from_vec(self.c.clone()))
            .unwrap()
            .with_equalities(mat(&self.e), DVector::from_vec(self.f.clone()))
            .unwrap()
            .with_inequalities(mat(&self.a), DVector::from_vec(self.b.clone()))
            .unwrap()
    }
}

/// Enumerates every subset of inequalities as the active set, solves the
/// resulting equality-constrained KKT system, and returns the smallest
/// objective among primal-feasible candidates.
pub fn active_set_enumeration(qp: &DenseQp) -> Option<(f64, Vec<f64>)> {
    let n = qp.c.len();
    let mi = qp.b.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0u32..(1 << mi) {
        let mut rows: Vec<(&Vec<f64>, f64)> = qp.e.iter().zip(qp.f.iter().copied()).collect();
        for k in 0..mi {
            if mask & (1 << k) != 0 {
                rows.push((&qp.a[k], qp.b[k]));
            }
        }
        let m = rows.len();
        if m > n {
            continue;
        }
        let dim = n + m;
        let mut kkt = vec![vec![0.0; dim]; dim];
        let mut rhs = vec![0.0; dim];
        for i in 0..n {
            for j in 0..n {
                kkt[i][j] = qp.q[i][j];
            }
            rhs[i] = -qp.c[i];
        }
        for (r, (row, value)) in rows.iter().enumerate() {
            for j in 0..n {
                kkt[n + r][j] = row[j];
                kkt[j][n + r] = row[j];
            }
            rhs[n + r] = *value;
        }
        let Some(sol) = gauss_solve(kkt, rhs) else {
            continue;
        };
        let x = sol[..n].to_vec();
        let feasible =
            qp.a.iter()
                .zip(&qp.b)
                .all(|(row, b)| row.iter().zip(&x).map(|(a, x)| a * x).sum::<f64>() <= b + 1e-9);
        if !feasible {
            continue;
        }
        let obj = qp.objective(&x);
        if best.as_ref().is_none_or(|(v, _)| obj < *v) {
            best = Some((obj, x));
        }
    }
    best
}

fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn gram(m: &[Vec<f64>], n: usize, ridge: f64) -> Vec<Vec<f64>> {
    let mut q = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            q[i][j] = m.iter().map(|row| row[i] * row[j]).sum::<f64>();
        }
        q[i][i] += ridge;
    }
    q
}

/// Strictly convex QP with a known interior feasible point.
pub fn random_strictly_convex_qp<R: Rng>(rng: &mut R, n: usize, me: usize, mi: usize) -> DenseQp {
    let m = random_matrix(rng, n, n);
    let q = gram(&m, n, 0.5);
    let c = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let x0: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let e = random_matrix(rng, me, n);
    let f = e.iter().map(|row| row.iter().zip(&x0).map(|(a, x)| a * x).sum()).collect();
    let a = random_matrix(rng, mi, n);
    let b = a
        .iter()
        .map(|row| row.iter().zip(&x0).map(|(a, x)| a * x).sum::<f64>() + rng.gen_range(0.0..0.5))
        .collect();
    DenseQp { q, c, e, f, a, b }
}

/// Convex (possibly rank-deficient) QP with equalities, inequalities and
/// finite bounds, all consistent with a random point.
pub fn random_convex_program<R: Rng>(rng: &mut R, n: usize) -> QuadraticProgram {
    let rank = rng.gen_range(0..=n);
    let m = random_matrix(rng, rank, n);
    let q = gram(&m, n, 0.0);
    let me = rng.gen_range(0..=n / 3);
    let mi = rng.gen_range(0..=n);
    let x0: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let e = random_matrix(rng, me, n);
    let a = random_matrix(rng, mi, n);
    let dot = |row: &Vec<f64>| row.iter().zip(&x0).map(|(a, x)| a * x).sum::<f64>();
    let f: Vec<f64> = e.iter().map(dot).collect();
    let b: Vec<f64> = a.iter().map(|r| dot(r) + rng.gen_range(0.0..1.0)).collect();
    let lower: Vec<f64> = x0.iter().map(|x| x - rng.gen_range(0.2..2.0)).collect();
    let upper: Vec<f64> = x0.iter().map(|x| x + rng.gen_range(0.2..2.0)).collect();
    let dense = DenseQp {
        q,
        c: (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        e,
        f,
        a,
        b,
    };
    dense
        .to_program()
        .with_bounds(DVector::from_vec(lower), DVector::from_vec(upper))
        .unwrap()
}

/// Flows from bus angles: solve the reduced susceptance system with the
/// slack angle pinned to zero, then `f = (θ_from − θ_to) / x`.
pub fn angle_flows(grid: &GridModel, injections: &[f64]) -> Vec<f64> {
    let n = grid.num_buses();
    let slack = grid.slack();
    let keep: Vec<usize> = (0..n).filter(|&b| b != slack).collect();
    let mut b = vec![vec![0.0; n]; n];
    for line in grid.lines() {
        let y = 1.0 / line.reactance;
        b[line.from][line.from] += y;
        b[line.to][line.to] += y;
        b[line.from][line.to] -= y;
        b[line.to][line.from] -= y;
    }
    let reduced: Vec<Vec<f64>> = keep.iter().map(|&i| keep.iter().map(|&j| b[i][j]).collect()).collect();
    let rhs: Vec<f64> = keep.iter().map(|&i| injections[i]).collect();
    let theta_reduced = if keep.is_empty() {
        vec![]
    } else {
        gauss_solve(reduced, rhs).unwrap()
    };
    let mut theta = vec![0.0; n];
    for (k, &bus) in keep.iter().enumerate() {
        theta[bus] = theta_reduced[k];
    }
    grid.lines().iter().map(|l| (theta[l.from] - theta[l.to]) / l.reactance).collect()
}

/// Forward-direction shift factors, one row per line, built column by column
/// from unit injections balanced at the slack bus.
pub fn shift_matrix(grid: &GridModel) -> Vec<Vec<f64>> {
    let n = grid.num_buses();
    let mut g = vec![vec![0.0; n]; grid.num_lines()];
    for bus in 0..n {
        if bus == grid.slack() {
            continue;
        }
        let mut x = vec![0.0; n];
        x[bus] = 1.0;
        x[grid.slack()] = -1.0;
        for (l, f) in angle_flows(grid, &x).into_iter().enumerate() {
            g[l][bus] = f;
        }
    }
    g
}
