//! Lossless DC network: shift factors, directed capacities and line flows.
//!
//! Rows `0..m` of the shift-factor matrix give from→to flows; rows `m..2m`
//! are their negatives so one-sided limits `G·x ≤ d` cover both directions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for the injection balance check in [`GridModel::line_flows`].
pub const BALANCE_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("network needs at least one bus")]
    Empty,
    #[error("line {line} references bus {bus}, but the network has {buses} buses")]
    UnknownBus { line: usize, bus: usize, buses: usize },
    #[error("line {line} connects bus {bus} to itself")]
    SelfLoop { line: usize, bus: usize },
    #[error("line {line} has non-positive reactance {reactance}")]
    Reactance { line: usize, reactance: f64 },
    #[error("line {line} has non-positive capacity {capacity}")]
    Capacity { line: usize, capacity: f64 },
    #[error("slack bus {slack} out of range for {buses} buses")]
    Slack { slack: usize, buses: usize },
    #[error("network is disconnected; components: {components:?}")]
    Disconnected { components: Vec<Vec<usize>> },
    #[error("net injections are unbalanced (sum = {sum:e})")]
    Unbalanced { sum: f64 },
    #[error("injection vector has length {found}, expected {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("shift-factor matrix is singular")]
    Singular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    /// Series reactance in per unit.
    pub reactance: f64,
    /// Limit on from→to flow (MW).
    pub capacity: f64,
    /// Limit on to→from flow (MW); equals `capacity` when symmetric.
    pub reverse_capacity: f64,
}

impl Line {
    pub fn symmetric(from: usize, to: usize, reactance: f64, capacity: f64) -> Self {
        Self {
            from,
            to,
            reactance,
            capacity,
            reverse_capacity: capacity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridModel {
    buses: usize,
    lines: Vec<Line>,
    slack: usize,
    shift_factors: DMatrix<f64>,
    capacities: DVector<f64>,
}

impl GridModel {
    pub fn new(buses: usize, lines: Vec<Line>, slack: usize) -> Result<Self, GridError> {
        if buses == 0 {
            return Err(GridError::Empty);
        }
        if slack >= buses {
            return Err(GridError::Slack { slack, buses });
        }
        for (l, line) in lines.iter().enumerate() {
            for bus in [line.from, line.to] {
                if bus >= buses {
                    return Err(GridError::UnknownBus { line: l, bus, buses });
                }
            }
            if line.from == line.to {
                return Err(GridError::SelfLoop { line: l, bus: line.from });
            }
            if !(line.reactance > 0.0) {
                return Err(GridError::Reactance {
                    line: l,
                    reactance: line.reactance,
                });
            }
            for capacity in [line.capacity, line.reverse_capacity] {
                if !(capacity > 0.0) {
                    return Err(GridError::Capacity { line: l, capacity });
                }
            }
        }
        let shift_factors = build_shift_factors(buses, &lines, slack)?;
        let m = lines.len();
        let capacities = DVector::from_fn(2 * m, |r, _| if r < m { lines[r].capacity } else { lines[r - m].reverse_capacity });
        Ok(Self {
            buses,
            lines,
            slack,
            shift_factors,
            capacities,
        })
    }

    pub fn num_buses(&self) -> usize {
        self.buses
    }

    pub fn num_lines(&self) -> usize {
        self.lines.len()
    }

    /// Number of directed flow rows, `2m`.
    pub fn num_directed(&self) -> usize {
        2 * self.lines.len()
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn slack(&self) -> usize {
        self.slack
    }

    /// Shift-factor matrix `G` (2m × n).
    pub fn shift_factors(&self) -> &DMatrix<f64> {
        &self.shift_factors
    }

    /// Directed capacities `d` (2m).
    pub fn capacities(&self) -> &DVector<f64> {
        &self.capacities
    }

    /// Directed flows `G·x` for one period of balanced net injections.
    pub fn line_flows(&self, injections: &DVector<f64>) -> Result<DVector<f64>, GridError> {
        line_flows(&self.shift_factors, injections)
    }
}

/// Directed flows `G·x`; rejects injections whose sum exceeds [`BALANCE_TOL`].
pub fn line_flows(shift_factors: &DMatrix<f64>, injections: &DVector<f64>) -> Result<DVector<f64>, GridError> {
    if injections.len() != shift_factors.ncols() {
        return Err(GridError::Dimension {
            expected: shift_factors.ncols(),
            found: injections.len(),
        });
    }
    let sum = injections.sum();
    if sum.abs() > BALANCE_TOL {
        return Err(GridError::Unbalanced { sum });
    }
    Ok(shift_factors * injections)
}

/// Connected components in ascending bus order.
pub fn components(buses: usize, lines: &[Line]) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..buses).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for line in lines {
        let (a, b) = (find(&mut parent, line.from), find(&mut parent, line.to));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut root_index = vec![usize::MAX; buses];
    for bus in 0..buses {
        let root = find(&mut parent, bus);
        if root_index[root] == usize::MAX {
            root_index[root] = groups.len();
            groups.push(Vec::new());
        }
        groups[root_index[root]].push(bus);
    }
    groups
}

/// Builds the stacked PTDF matrix with respect to injections withdrawn at `slack`.
pub fn build_shift_factors(buses: usize, lines: &[Line], slack: usize) -> Result<DMatrix<f64>, GridError> {
    let groups = components(buses, lines);
    if groups.len() > 1 {
        return Err(GridError::Disconnected { components: groups });
    }
    let m = lines.len();
    let mut susceptance = DMatrix::zeros(buses, buses);
    for line in lines {
        let y = 1.0 / line.reactance;
        susceptance[(line.from, line.from)] += y;
        susceptance[(line.to, line.to)] += y;
        susceptance[(line.from, line.to)] -= y;
        susceptance[(line.to, line.from)] -= y;
    }
    let keep: Vec<usize> = (0..buses).filter(|&b| b != slack).collect();
    let reduced = DMatrix::from_fn(keep.len(), keep.len(), |i, j| susceptance[(keep[i], keep[j])]);
    let inverse = if keep.is_empty() {
        DMatrix::zeros(0, 0)
    } else {
        reduced.cholesky().ok_or(GridError::Singular)?.inverse()
    };
    // Angles for a unit injection at each non-slack bus.
    let mut angles = DMatrix::<f64>::zeros(buses, buses);
    for (jj, &bus) in keep.iter().enumerate() {
        for (ii, &row) in keep.iter().enumerate() {
            angles[(row, bus)] = inverse[(ii, jj)];
        }
    }
    let mut g = DMatrix::zeros(2 * m, buses);
    for (l, line) in lines.iter().enumerate() {
        for bus in 0..buses {
            let flow = (angles[(line.from, bus)] - angles[(line.to, bus)]) / line.reactance;
            g[(l, bus)] = flow;
            g[(l + m, bus)] = -flow;
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    #[test]
    fn two_bus_shift_factors() {
        let grid = GridModel::new(2, vec![Line::symmetric(0, 1, 0.1, 50.0)], 0).unwrap();
        let g = grid.shift_factors();
        assert_eq!(g.shape(), (2, 2));
        assert!((g[(0, 0)]).abs() < 1e-15 && (g[(0, 1)] + 1.0).abs() < 1e-12);
        assert!((g[(1, 0)]).abs() < 1e-15 && (g[(1, 1)] - 1.0).abs() < 1e-12);
        let flows = grid.line_flows(&dvector![50.0, -50.0]).unwrap();
        assert!((flows[0] - 50.0).abs() < 1e-9 && (flows[1] + 50.0).abs() < 1e-9);
    }

    #[test]
    fn triangle_splits_two_thirds() {
        let lines = vec![
            Line::symmetric(0, 1, 1.0, 10.0),
            Line::symmetric(1, 2, 1.0, 10.0),
            Line::symmetric(0, 2, 1.0, 10.0),
        ];
        let grid = GridModel::new(3, lines, 0).unwrap();
        let flows = grid.line_flows(&dvector![1.0, -1.0, 0.0]).unwrap();
        assert!((flows[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((flows[1] + 1.0 / 3.0).abs() < 1e-12);
        assert!((flows[2] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn structure_invariants() {
        let lines = vec![
            Line::symmetric(0, 1, 0.2, 10.0),
            Line::symmetric(1, 2, 0.5, 10.0),
            Line::symmetric(2, 3, 0.1, 10.0),
            Line::symmetric(3, 0, 0.3, 10.0),
        ];
        let grid = GridModel::new(4, lines, 2).unwrap();
        let g = grid.shift_factors();
        let m = grid.num_lines();
        for l in 0..m {
            for b in 0..4 {
                assert_eq!(g[(l + m, b)], -g[(l, b)]);
            }
        }
        assert!(g.column(2).iter().all(|v| *v == 0.0));
        assert!(grid.capacities().iter().all(|d| *d > 0.0));
    }

    #[test]
    fn disconnected_network_lists_components() {
        let err = GridModel::new(4, vec![Line::symmetric(0, 1, 1.0, 1.0), Line::symmetric(2, 3, 1.0, 1.0)], 0).unwrap_err();
        assert_eq!(
            err,
            GridError::Disconnected {
                components: vec![vec![0, 1], vec![2, 3]]
            }
        );
    }

    #[test]
    fn zero_and_unbalanced_injections() {
        let grid = GridModel::new(2, vec![Line::symmetric(0, 1, 0.1, 50.0)], 0).unwrap();
        assert_eq!(grid.line_flows(&dvector![0.0, 0.0]).unwrap(), dvector![0.0, 0.0]);
        assert!(matches!(grid.line_flows(&dvector![1.0, 0.0]), Err(GridError::Unbalanced { .. })));
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(matches!(
            GridModel::new(2, vec![Line::symmetric(0, 1, 0.0, 5.0)], 0),
            Err(GridError::Reactance { .. })
        ));
        assert!(matches!(
            GridModel::new(2, vec![Line::symmetric(0, 1, 1.0, 0.0)], 0),
            Err(GridError::Capacity { .. })
        ));
        assert!(matches!(
            GridModel::new(2, vec![Line::symmetric(0, 2, 1.0, 1.0)], 0),
            Err(GridError::UnknownBus { .. })
        ));
    }
}
