//! Storage dynamics shared by batteries and cascaded hydro reservoirs.
//!
//! A node's stored quantity evolves as
//!
//! ```text
//! z_t = z₀ + Σ_{τ≤t} [ y_τ + Σ_{j∈Ω} q_{j,τ−lag(j)} − q_τ ]
//! ```
//!
//! where `q` is the node's own discharge (hm³ for hydro, MWh for batteries),
//! `y` the incremental inflow and `Ω` the immediately-upstream reservoirs.
//! For a battery `Ω = ∅`, `y = 0` and `q = Δt·u`, which is the usual
//! state-of-charge recursion.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hydro::PlantParameters;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReservoirError {
    #[error("horizon must contain at least one period")]
    EmptyHorizon,
    #[error("{what} has length {found}, expected {expected}")]
    Length { what: String, expected: usize, found: usize },
    #[error("cascade contains a cycle through storages {0:?}")]
    Cycle(Vec<usize>),
    #[error("storage {node}: {reason}")]
    Topology { node: usize, reason: String },
    #[error("storage {node}: {reason}")]
    Spec { node: usize, reason: String },
    #[error("{what} = {value} at period {period} outside [{min}, {max}]")]
    Range {
        what: &'static str,
        period: usize,
        value: f64,
        min: f64,
        max: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StorageKind {
    Hydro,
    Ess,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpstreamLink {
    pub storage: usize,
    /// Travel time in periods between release upstream and arrival.
    pub lag: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeTopology {
    kinds: Vec<StorageKind>,
    upstream: Vec<Vec<UpstreamLink>>,
}

impl CascadeTopology {
    pub fn new(kinds: Vec<StorageKind>, upstream: Vec<Vec<UpstreamLink>>) -> Result<Self, ReservoirError> {
        if kinds.len() != upstream.len() {
            return Err(ReservoirError::Length {
                what: "upstream sets".into(),
                expected: kinds.len(),
                found: upstream.len(),
            });
        }
        for (node, links) in upstream.iter().enumerate() {
            if kinds[node] == StorageKind::Ess && !links.is_empty() {
                return Err(ReservoirError::Topology {
                    node,
                    reason: "a battery cannot have upstream reservoirs".into(),
                });
            }
            let mut seen = BTreeSet::new();
            for link in links {
                if link.storage >= kinds.len() {
                    return Err(ReservoirError::Topology {
                        node,
                        reason: format!("upstream storage {} does not exist", link.storage),
                    });
                }
                if kinds[link.storage] == StorageKind::Ess {
                    return Err(ReservoirError::Topology {
                        node,
                        reason: format!("battery {} cannot release water downstream", link.storage),
                    });
                }
                if !seen.insert(link.storage) {
                    return Err(ReservoirError::Topology {
                        node,
                        reason: format!("upstream storage {} listed twice", link.storage),
                    });
                }
            }
        }
        Ok(Self { kinds, upstream })
    }

    /// Topology with no hydraulic coupling.
    pub fn isolated(kinds: Vec<StorageKind>) -> Self {
        let upstream = vec![Vec::new(); kinds.len()];
        Self { kinds, upstream }
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn kind(&self, node: usize) -> StorageKind {
        self.kinds[node]
    }

    pub fn upstream(&self, node: usize) -> &[UpstreamLink] {
        &self.upstream[node]
    }

    /// Nodes receiving water released by `node`, with their lags.
    pub fn downstream(&self, node: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.upstream
            .iter()
            .enumerate()
            .flat_map(move |(i, links)| links.iter().filter(move |l| l.storage == node).map(move |l| (i, l.lag)))
    }
}

/// Topological order (upstream first, lowest index on ties), or one cycle.
pub fn validate_cascade(topology: &CascadeTopology) -> Result<Vec<usize>, ReservoirError> {
    let n = topology.len();
    let mut indegree: Vec<usize> = (0..n).map(|i| topology.upstream(i).len()).collect();
    let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(&node) = ready.iter().next() {
        ready.remove(&node);
        order.push(node);
        for (down, _) in topology.downstream(node) {
            indegree[down] -= 1;
            if indegree[down] == 0 {
                ready.insert(down);
            }
        }
    }
    if order.len() == n {
        return Ok(order);
    }
    // Walk upstream links among the unresolved nodes until one repeats.
    let start = (0..n).find(|&i| indegree[i] > 0).expect("unresolved node exists");
    let mut path = vec![start];
    let mut current = start;
    loop {
        let next = topology
            .upstream(current)
            .iter()
            .map(|l| l.storage)
            .find(|&j| indegree[j] > 0)
            .expect("every unresolved node has an unresolved upstream");
        if let Some(pos) = path.iter().position(|&p| p == next) {
            let mut cycle: Vec<usize> = path[pos..].to_vec();
            cycle.reverse();
            let min_pos = cycle.iter().enumerate().min_by_key(|(_, v)| **v).map(|(i, _)| i).unwrap();
            cycle.rotate_left(min_pos);
            return Err(ReservoirError::Cycle(cycle));
        }
        path.push(next);
        current = next;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReservoirSpec {
    /// Initial stored quantity z₀.
    pub initial: f64,
    /// Lower bounds ž, one per period.
    pub lower: Vec<f64>,
    /// Upper bounds ẑ, one per period.
    pub upper: Vec<f64>,
    /// Incremental inflows y, one per period.
    pub inflow: Vec<f64>,
}

impl ReservoirSpec {
    pub fn horizon(&self) -> usize {
        self.lower.len()
    }

    pub fn validate(&self, node: usize, kind: StorageKind, horizon: usize) -> Result<(), ReservoirError> {
        for (what, series) in [
            ("lower bounds", &self.lower),
            ("upper bounds", &self.upper),
            ("inflows", &self.inflow),
        ] {
            if series.len() != horizon {
                return Err(ReservoirError::Length {
                    what: format!("storage {node} {what}"),
                    expected: horizon,
                    found: series.len(),
                });
            }
        }
        let fail = |reason: String| Err(ReservoirError::Spec { node, reason });
        for t in 0..horizon {
            if !(self.lower[t] <= self.upper[t]) {
                return fail(format!(
                    "lower bound {} exceeds upper bound {} at period {t}",
                    self.lower[t], self.upper[t]
                ));
            }
        }
        if horizon > 0 && !(self.lower[0] <= self.initial && self.initial <= self.upper[0]) {
            return fail(format!(
                "initial level {} outside first-period bounds [{}, {}]",
                self.initial, self.lower[0], self.upper[0]
            ));
        }
        match kind {
            StorageKind::Hydro if self.inflow.iter().any(|y| !(*y >= 0.0)) => fail("hydro inflows must be nonnegative".into()),
            StorageKind::Ess if self.inflow.iter().any(|y| *y != 0.0) => fail("battery inflows must be zero".into()),
            _ => Ok(()),
        }
    }
}

/// Lower-triangular matrix of −1 entries mapping a discharge schedule to
/// cumulative depletion.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeMatrix {
    matrix: DMatrix<f64>,
}

impl CumulativeMatrix {
    pub fn horizon(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

pub fn build_cumulative_matrix(horizon: usize) -> Result<CumulativeMatrix, ReservoirError> {
    if horizon == 0 {
        return Err(ReservoirError::EmptyHorizon);
    }
    Ok(CumulativeMatrix {
        matrix: DMatrix::from_fn(horizon, horizon, |t, tau| if tau <= t { -1.0 } else { 0.0 }),
    })
}

/// Per-period map from power discharge `u` to stored-quantity discharge `q`.
#[derive(Debug, Clone, PartialEq)]
pub enum Conversion {
    /// Hydro plant: `q = a·u² + b·u` on `0 ≤ u ≤ max_power`.
    Quadratic { a: f64, b: f64, max_power: f64 },
    /// Battery: `q = Δt·u` on `−charge ≤ u ≤ discharge`.
    Battery {
        period_hours: f64,
        max_charge: f64,
        max_discharge: f64,
    },
}

impl Conversion {
    pub fn hydro(plant: &PlantParameters) -> Self {
        Conversion::Quadratic {
            a: plant.a,
            b: plant.b,
            max_power: crate::hydro::max_power(plant),
        }
    }

    pub fn power_bounds(&self) -> (f64, f64) {
        match *self {
            Conversion::Quadratic { max_power, .. } => (0.0, max_power),
            Conversion::Battery {
                max_charge, max_discharge, ..
            } => (-max_charge, max_discharge),
        }
    }

    /// `q(u)` without range checks.
    pub fn apply(&self, u: f64) -> f64 {
        match *self {
            Conversion::Quadratic { a, b, .. } => a * u * u + b * u,
            Conversion::Battery { period_hours, .. } => period_hours * u,
        }
    }

    /// Quadratic and linear coefficients of `q(u)`.
    pub fn coefficients(&self) -> (f64, f64) {
        match *self {
            Conversion::Quadratic { a, b, .. } => (a, b),
            Conversion::Battery { period_hours, .. } => (0.0, period_hours),
        }
    }
}

/// Converts a power schedule into a discharge schedule period by period.
pub fn conversion_series(conversion: &Conversion, power: &[f64]) -> Result<Vec<f64>, ReservoirError> {
    let (lo, hi) = conversion.power_bounds();
    let tol = 1e-9 * (1.0 + hi.abs().max(lo.abs()));
    power
        .iter()
        .enumerate()
        .map(|(t, &u)| {
            if u < lo - tol || u > hi + tol || u.is_nan() {
                Err(ReservoirError::Range {
                    what: "power",
                    period: t,
                    value: u,
                    min: lo,
                    max: hi,
                })
            } else {
                Ok(conversion.apply(u))
            }
        })
        .collect()
}

/// Evaluates the stored quantity of `node` given every node's discharge
/// schedule. Bounds are not enforced here.
pub fn storage_trajectory(
    spec: &ReservoirSpec,
    topology: &CascadeTopology,
    node: usize,
    discharges: &[Vec<f64>],
) -> Result<Vec<f64>, ReservoirError> {
    let horizon = spec.inflow.len();
    if discharges.len() != topology.len() {
        return Err(ReservoirError::Length {
            what: "discharge schedules".into(),
            expected: topology.len(),
            found: discharges.len(),
        });
    }
    let mut involved = vec![node];
    involved.extend(topology.upstream(node).iter().map(|l| l.storage));
    for &j in &involved {
        if discharges[j].len() != horizon {
            return Err(ReservoirError::Length {
                what: format!("discharge schedule of storage {j}"),
                expected: horizon,
                found: discharges[j].len(),
            });
        }
        if topology.kind(j) == StorageKind::Hydro {
            if let Some((t, &q)) = discharges[j].iter().enumerate().find(|(_, q)| !(**q >= 0.0)) {
                return Err(ReservoirError::Range {
                    what: "hydro discharge",
                    period: t,
                    value: q,
                    min: 0.0,
                    max: f64::INFINITY,
                });
            }
        }
    }
    let mut level = spec.initial;
    let mut out = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let arriving: f64 = topology
            .upstream(node)
            .iter()
            .filter(|l| t >= l.lag)
            .map(|l| discharges[l.storage][t - l.lag])
            .sum();
        level += spec.inflow[t] + arriving - discharges[node][t];
        out.push(level);
    }
    Ok(out)
}
