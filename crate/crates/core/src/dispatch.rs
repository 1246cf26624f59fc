//! Multi-period energy-constrained economic dispatch.
//!
//! Decision variables are participant outputs `P` and storage powers `U`
//! (positive = injection into the grid). The program is
//!
//! ```text
//! min  Σₜ Δt Σⱼ (c₂ P²ⱼₜ + c₁ Pⱼₜ)
//! s.t. 1ᵀ(pₜ + uₜ) = 0                 (balance, dual γ)
//!      G(pₜ + uₜ) ≤ d                   (directed flow limits, dual μ)
//!      ž ≤ z(U) ≤ ẑ                     (storage levels, duals η̌ and η̂)
//!      box limits on P and U
//! ```
//!
//! Storage levels depend on discharges `q = a·u² + b·u`. A discharge term
//! that raises the left-hand side of a `≤` row is kept exactly as a convex
//! quadratic; one that lowers it is replaced by its tangent `b·u` at zero,
//! which tightens the row. Batteries are linear, so nothing changes for them.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridError, GridModel};
use crate::hydro::PlantParameters;
use crate::qp::{self, ConstraintRef, KktResiduals, QpError, QpStatus, QuadraticProgram};
use crate::reservoir::{
    conversion_series, storage_trajectory, validate_cascade, CascadeTopology, Conversion, ReservoirError, ReservoirSpec, StorageKind,
    UpstreamLink,
};

/// Default absolute KKT tolerance for dispatch solves.
pub const DEFAULT_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DispatchError {
    #[error("invalid case: {field}: {reason}")]
    InvalidCase { field: String, reason: String },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Reservoir(#[from] ReservoirError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("dispatch is infeasible: {row} (violation {violation:.3e})")]
    Infeasible {
        row: String,
        violation: f64,
        conflict: Vec<String>,
    },
    #[error("dispatch solver stopped with status {status:?} (KKT residual {residual:.3e})")]
    NotSolved { status: QpStatus, residual: f64 },
    #[error("merchandising surplus {surplus} disagrees with its decomposition {decomposition}")]
    Inconsistent { surplus: f64, decomposition: f64 },
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> DispatchError {
    DispatchError::InvalidCase {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParticipantKind {
    /// Supply offer, `0 ≤ min ≤ P ≤ max`.
    Generator,
    /// Elastic demand bid, `min ≤ P ≤ max ≤ 0`.
    Load,
    /// Price-inelastic demand, `P = min = max ≤ 0`.
    FixedLoad,
}

/// Per-period quadratic cost `c₂P² + c₁P` in $/h with output limits in MW.
///
/// For a demand bid `c₁` is the willingness to pay, so `c₁P` is a benefit
/// when `P < 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostFunction {
    pub quadratic: Vec<f64>,
    pub linear: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl CostFunction {
    pub fn evaluate(&self, period: usize, power: f64) -> f64 {
        self.quadratic[period] * power * power + self.linear[period] * power
    }

    pub fn marginal(&self, period: usize, power: f64) -> f64 {
        2.0 * self.quadratic[period] * power + self.linear[period]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Participant {
    pub name: String,
    pub bus: usize,
    pub kind: ParticipantKind,
    pub cost: CostFunction,
}

impl Participant {
    pub fn generator(name: &str, bus: usize, quadratic: f64, linear: f64, capacity: f64, horizon: usize) -> Self {
        Self {
            name: name.into(),
            bus,
            kind: ParticipantKind::Generator,
            cost: CostFunction {
                quadratic: vec![quadratic; horizon],
                linear: vec![linear; horizon],
                min: vec![0.0; horizon],
                max: vec![capacity; horizon],
            },
        }
    }

    pub fn load(name: &str, bus: usize, quadratic: f64, bid: f64, max_demand: f64, horizon: usize) -> Self {
        Self {
            name: name.into(),
            bus,
            kind: ParticipantKind::Load,
            cost: CostFunction {
                quadratic: vec![quadratic; horizon],
                linear: vec![bid; horizon],
                min: vec![-max_demand; horizon],
                max: vec![0.0; horizon],
            },
        }
    }

    pub fn fixed_load(name: &str, bus: usize, demand: &[f64]) -> Self {
        let horizon = demand.len();
        let p: Vec<f64> = demand.iter().map(|d| -d).collect();
        Self {
            name: name.into(),
            bus,
            kind: ParticipantKind::FixedLoad,
            cost: CostFunction {
                quadratic: vec![0.0; horizon],
                linear: vec![0.0; horizon],
                min: p.clone(),
                max: p,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "technology", rename_all = "snake_case")]
pub enum StorageTechnology {
    /// Battery with power limits in MW.
    Ess {
        max_charge: f64,
        max_discharge: f64,
    },
    Hydro {
        plant: PlantParameters,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageUnit {
    pub name: String,
    pub bus: usize,
    pub technology: StorageTechnology,
    pub reservoir: ReservoirSpec,
    pub upstream: Vec<UpstreamLink>,
}

impl StorageUnit {
    pub fn kind(&self) -> StorageKind {
        match self.technology {
            StorageTechnology::Ess { .. } => StorageKind::Ess,
            StorageTechnology::Hydro { .. } => StorageKind::Hydro,
        }
    }

    pub fn conversion(&self, period_hours: f64) -> Conversion {
        match &self.technology {
            StorageTechnology::Ess { max_charge, max_discharge } => Conversion::Battery {
                period_hours,
                max_charge: *max_charge,
                max_discharge: *max_discharge,
            },
            StorageTechnology::Hydro { plant } => Conversion::hydro(plant),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpedCase {
    pub name: String,
    pub bus_names: Vec<String>,
    pub grid: GridModel,
    pub participants: Vec<Participant>,
    pub storages: Vec<StorageUnit>,
    pub horizon: usize,
    pub period_hours: f64,
    pub tolerance: f64,
}

impl MpedCase {
    /// Case with default names and tolerance.
    pub fn new(grid: GridModel, participants: Vec<Participant>, storages: Vec<StorageUnit>, horizon: usize, period_hours: f64) -> Self {
        let bus_names = (0..grid.num_buses()).map(|b| format!("bus{b}")).collect();
        Self {
            name: "case".into(),
            bus_names,
            grid,
            participants,
            storages,
            horizon,
            period_hours,
            tolerance: DEFAULT_TOLERANCE,
        }
    }

    pub fn topology(&self) -> Result<CascadeTopology, ReservoirError> {
        CascadeTopology::new(
            self.storages.iter().map(StorageUnit::kind).collect(),
            self.storages.iter().map(|s| s.upstream.clone()).collect(),
        )
    }

    /// Checks every structural requirement and returns the cascade.
    pub fn validate(&self) -> Result<CascadeTopology, DispatchError> {
        let t_len = self.horizon;
        let n = self.grid.num_buses();
        if t_len == 0 {
            return Err(invalid("horizon", "must contain at least one period"));
        }
        if !(self.period_hours > 0.0 && self.period_hours.is_finite()) {
            return Err(invalid("period_hours", format!("must be positive, got {}", self.period_hours)));
        }
        if !(self.tolerance > 0.0) {
            return Err(invalid("tolerance", format!("must be positive, got {}", self.tolerance)));
        }
        if self.bus_names.len() != n {
            return Err(invalid("bus_names", format!("expected {n} names, found {}", self.bus_names.len())));
        }
        for (j, p) in self.participants.iter().enumerate() {
            let field = |f: &str| format!("participants[{j}] ({}).{f}", p.name);
            if p.bus >= n {
                return Err(invalid(field("bus"), format!("bus {} does not exist", p.bus)));
            }
            let c = &p.cost;
            for (f, series) in [("quadratic", &c.quadratic), ("linear", &c.linear), ("min", &c.min), ("max", &c.max)] {
                if series.len() != t_len {
                    return Err(invalid(field(f), format!("expected {t_len} values, found {}", series.len())));
                }
                if series.iter().any(|v| !v.is_finite()) {
                    return Err(invalid(field(f), "values must be finite"));
                }
            }
            for t in 0..t_len {
                if c.quadratic[t] < 0.0 {
                    return Err(invalid(field("quadratic"), "coefficient must be nonnegative"));
                }
                if c.min[t] > c.max[t] {
                    return Err(invalid(field("min"), format!("exceeds max at period {t}")));
                }
                let ok = match p.kind {
                    ParticipantKind::Generator => c.min[t] >= 0.0,
                    ParticipantKind::Load => c.max[t] <= 0.0,
                    ParticipantKind::FixedLoad => c.min[t] == c.max[t] && c.max[t] <= 0.0,
                };
                if !ok {
                    return Err(invalid(
                        field("min"),
                        format!("limits inconsistent with {:?} at period {t}", p.kind),
                    ));
                }
            }
        }
        for (s, unit) in self.storages.iter().enumerate() {
            if unit.bus >= n {
                return Err(invalid(
                    format!("storages[{s}] ({}).bus", unit.name),
                    format!("bus {} does not exist", unit.bus),
                ));
            }
            if let StorageTechnology::Ess { max_charge, max_discharge } = unit.technology {
                if !(max_charge >= 0.0 && max_discharge >= 0.0 && max_charge.is_finite() && max_discharge.is_finite()) {
                    return Err(invalid(
                        format!("storages[{s}] ({}).power", unit.name),
                        "limits must be finite and nonnegative",
                    ));
                }
            }
            unit.reservoir.validate(s, unit.kind(), t_len)?;
        }
        let topology = self.topology()?;
        validate_cascade(&topology)?;
        Ok(topology)
    }

    pub fn num_participants(&self) -> usize {
        self.participants.len()
    }

    pub fn num_storages(&self) -> usize {
        self.storages.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Reverse,
}

/// Identifies a constraint of the dispatch or feasibility programs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "row", rename_all = "snake_case")]
pub enum RowLabel {
    Balance { period: usize },
    Flow { line: usize, direction: Direction, period: usize },
    StorageUpper { storage: usize, period: usize },
    StorageLower { storage: usize, period: usize },
    EnergyTarget { storage: usize },
    PowerBound { storage: usize, period: usize },
}

impl RowLabel {
    /// Human-readable description in terms of case entities (1-based periods).
    pub fn describe(&self, case: &MpedCase) -> String {
        let storage = |s: usize| case.storages.get(s).map_or_else(|| format!("#{s}"), |u| u.name.clone());
        match *self {
            RowLabel::Balance { period } => format!("power balance at period {}", period + 1),
            RowLabel::Flow { line, direction, period } => {
                let l = &case.grid.lines()[line];
                let (a, b) = match direction {
                    Direction::Forward => (l.from, l.to),
                    Direction::Reverse => (l.to, l.from),
                };
                format!(
                    "flow limit of line {line} ({} -> {}) at period {}",
                    case.bus_names[a],
                    case.bus_names[b],
                    period + 1
                )
            }
            RowLabel::StorageUpper { storage: s, period } => {
                format!("upper level of storage {} at period {}", storage(s), period + 1)
            }
            RowLabel::StorageLower { storage: s, period } => {
                format!("lower level of storage {} at period {}", storage(s), period + 1)
            }
            RowLabel::EnergyTarget { storage: s } => format!("energy target of storage {}", storage(s)),
            RowLabel::PowerBound { storage: s, period } => {
                format!("power limits of storage {} at period {}", storage(s), period + 1)
            }
        }
    }
}

impl fmt::Display for RowLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// One sparse constraint row `Σ aⱼxⱼ + Σ hⱼxⱼ² ≤ rhs` (or `=` for equalities).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRow {
    pub label: RowLabel,
    pub linear: Vec<(usize, f64)>,
    pub quadratic: Vec<(usize, f64)>,
    pub rhs: f64,
}

/// Builds the convexified storage-level rows for all storages.
///
/// `var(s, t)` maps a storage power to its column. `relief[s][t]` is
/// subtracted from the upper right-hand sides (zero in dispatch).
pub fn storage_rows(
    case: &MpedCase,
    topology: &CascadeTopology,
    var: impl Fn(usize, usize) -> usize,
    relief: Option<&[Vec<f64>]>,
) -> Vec<SparseRow> {
    let t_len = case.horizon;
    let coefficients: Vec<(f64, f64)> = case
        .storages
        .iter()
        .map(|s| s.conversion(case.period_hours).coefficients())
        .collect();
    let mut rows = Vec::with_capacity(2 * case.storages.len() * t_len);
    for (s, unit) in case.storages.iter().enumerate() {
        let spec = &unit.reservoir;
        let mut cumulative_inflow = 0.0;
        for t in 0..t_len {
            cumulative_inflow += spec.inflow[t];
            // Signed discharge terms of z_t − z₀ − Σy: (storage, period, sign).
            let mut terms: Vec<(usize, usize, f64)> = (0..=t).map(|tau| (s, tau, -1.0)).collect();
            for link in topology.upstream(s) {
                for tau in 0..=t {
                    if tau >= link.lag {
                        terms.push((link.storage, tau - link.lag, 1.0));
                    }
                }
            }
            let relief_t = relief.map_or(0.0, |r| r[s][t]);
            let base = spec.initial + cumulative_inflow;
            for (label, side, rhs) in [
                (
                    RowLabel::StorageUpper { storage: s, period: t },
                    1.0,
                    spec.upper[t] - relief_t - base,
                ),
                (RowLabel::StorageLower { storage: s, period: t }, -1.0, base - spec.lower[t]),
            ] {
                let mut linear: BTreeMap<usize, f64> = BTreeMap::new();
                let mut quadratic: BTreeMap<usize, f64> = BTreeMap::new();
                for &(j, tau, sign) in &terms {
                    let sigma = side * sign;
                    let (a, b) = coefficients[j];
                    let col = var(j, tau);
                    *linear.entry(col).or_default() += sigma * b;
                    if sigma > 0.0 && a > 0.0 {
                        *quadratic.entry(col).or_default() += sigma * a;
                    }
                }
                rows.push(SparseRow {
                    label,
                    linear: linear.into_iter().filter(|(_, v)| *v != 0.0).collect(),
                    quadratic: quadratic.into_iter().collect(),
                    rhs,
                });
            }
        }
    }
    rows
}

/// Dense program from sparse rows.
pub fn build_program(
    n: usize,
    hessian_diagonal: &[f64],
    linear: &[f64],
    equalities: &[SparseRow],
    inequalities: &[SparseRow],
    lower: &[f64],
    upper: &[f64],
) -> Result<QuadraticProgram, QpError> {
    let dense = |rows: &[SparseRow]| {
        let mut m = DMatrix::zeros(rows.len(), n);
        for (r, row) in rows.iter().enumerate() {
            for &(j, v) in &row.linear {
                m[(r, j)] += v;
            }
        }
        (m, DVector::from_iterator(rows.len(), rows.iter().map(|r| r.rhs)))
    };
    let (e, f) = dense(equalities);
    let (a, b) = dense(inequalities);
    let mut program = QuadraticProgram::new(
        DMatrix::from_diagonal(&DVector::from_column_slice(hessian_diagonal)),
        DVector::from_column_slice(linear),
    )?
    .with_equalities(e, f)?
    .with_inequalities(a, b)?
    .with_bounds(DVector::from_column_slice(lower), DVector::from_column_slice(upper))?;
    for (r, row) in inequalities.iter().enumerate() {
        for &(j, h) in &row.quadratic {
            program = program.with_quadratic_term(r, j, h)?;
        }
    }
    Ok(program)
}

/// Optional restriction on one storage unit's schedule.
#[derive(Debug, Clone, PartialEq)]
pub enum StorageDirective {
    /// Power fixed to the given schedule (MW).
    Fixed(Vec<f64>),
    /// Free schedule with `Σₜ uₜ·Δt` equal to the given energy (MWh).
    TotalEnergy(f64),
}

/// Assembled dispatch program with the bookkeeping needed to read it back.
#[derive(Debug, Clone)]
pub struct DispatchProgram {
    pub program: QuadraticProgram,
    pub equality_labels: Vec<RowLabel>,
    pub inequality_labels: Vec<RowLabel>,
    num_participants: usize,
    num_storages: usize,
    horizon: usize,
}

impl DispatchProgram {
    pub fn participant_var(&self, j: usize, t: usize) -> usize {
        j * self.horizon + t
    }

    pub fn storage_var(&self, s: usize, t: usize) -> usize {
        (self.num_participants + s) * self.horizon + t
    }

    pub fn num_variables(&self) -> usize {
        (self.num_participants + self.num_storages) * self.horizon
    }
}

pub fn assemble_mped(case: &MpedCase) -> Result<DispatchProgram, DispatchError> {
    assemble_with(case, &BTreeMap::new())
}

pub fn assemble_with(case: &MpedCase, directives: &BTreeMap<usize, StorageDirective>) -> Result<DispatchProgram, DispatchError> {
    let topology = case.validate()?;
    let t_len = case.horizon;
    let np = case.num_participants();
    let ns = case.num_storages();
    let n = (np + ns) * t_len;
    if n == 0 {
        return Err(invalid("participants", "case has no decision variables"));
    }
    let dt = case.period_hours;
    let layout = DispatchProgram {
        program: QuadraticProgram::new(DMatrix::zeros(0, 0), DVector::zeros(0))?,
        equality_labels: Vec::new(),
        inequality_labels: Vec::new(),
        num_participants: np,
        num_storages: ns,
        horizon: t_len,
    };

    let mut hessian = vec![0.0; n];
    let mut linear = vec![0.0; n];
    let mut lower = vec![0.0; n];
    let mut upper = vec![0.0; n];
    for (j, p) in case.participants.iter().enumerate() {
        for t in 0..t_len {
            let v = layout.participant_var(j, t);
            hessian[v] = 2.0 * dt * p.cost.quadratic[t];
            linear[v] = dt * p.cost.linear[t];
            lower[v] = p.cost.min[t];
            upper[v] = p.cost.max[t];
        }
    }
    for (s, unit) in case.storages.iter().enumerate() {
        let (lo, hi) = unit.conversion(dt).power_bounds();
        for t in 0..t_len {
            let v = layout.storage_var(s, t);
            lower[v] = lo;
            upper[v] = hi;
        }
    }

    let bus_of = |v: usize| -> usize {
        let entity = v / t_len;
        if entity < np {
            case.participants[entity].bus
        } else {
            case.storages[entity - np].bus
        }
    };

    let mut equalities = Vec::new();
    for t in 0..t_len {
        equalities.push(SparseRow {
            label: RowLabel::Balance { period: t },
            linear: (0..np + ns).map(|e| (e * t_len + t, 1.0)).collect(),
            quadratic: Vec::new(),
            rhs: 0.0,
        });
    }
    for (&s, directive) in directives {
        if s >= ns {
            return Err(invalid("storage directive", format!("storage {s} does not exist")));
        }
        let (lo, hi) = case.storages[s].conversion(dt).power_bounds();
        match directive {
            StorageDirective::Fixed(schedule) => {
                if schedule.len() != t_len {
                    return Err(invalid(
                        "storage directive",
                        format!("schedule has {} periods, expected {t_len}", schedule.len()),
                    ));
                }
                for (t, &u) in schedule.iter().enumerate() {
                    if u < lo - 1e-9 || u > hi + 1e-9 {
                        return Err(invalid(
                            format!("storages[{s}] ({}) schedule", case.storages[s].name),
                            format!("power {u} at period {} outside [{lo}, {hi}]", t + 1),
                        ));
                    }
                    let v = layout.storage_var(s, t);
                    lower[v] = u.clamp(lo, hi);
                    upper[v] = u.clamp(lo, hi);
                }
            }
            StorageDirective::TotalEnergy(energy) => equalities.push(SparseRow {
                label: RowLabel::EnergyTarget { storage: s },
                linear: (0..t_len).map(|t| (layout.storage_var(s, t), dt)).collect(),
                quadratic: Vec::new(),
                rhs: *energy,
            }),
        }
    }

    let g = case.grid.shift_factors();
    let d = case.grid.capacities();
    let m = case.grid.num_lines();
    let mut inequalities = Vec::new();
    for t in 0..t_len {
        for l in 0..2 * m {
            let row: Vec<(usize, f64)> = (0..np + ns)
                .map(|e| e * t_len + t)
                .map(|v| (v, g[(l, bus_of(v))]))
                .filter(|(_, c)| *c != 0.0)
                .collect();
            inequalities.push(SparseRow {
                label: RowLabel::Flow {
                    line: l % m,
                    direction: if l < m { Direction::Forward } else { Direction::Reverse },
                    period: t,
                },
                linear: row,
                quadratic: Vec::new(),
                rhs: d[l],
            });
        }
    }
    inequalities.extend(storage_rows(case, &topology, |s, t| layout.storage_var(s, t), None));

    let program = build_program(n, &hessian, &linear, &equalities, &inequalities, &lower, &upper)?;
    Ok(DispatchProgram {
        program,
        equality_labels: equalities.iter().map(|r| r.label).collect(),
        inequality_labels: inequalities.iter().map(|r| r.label).collect(),
        ..layout
    })
}

/// Optimal dispatch with prices. Matrices are stored entity-major:
/// `participant_output[j][t]`, `lmp[bus][t]`, `flow_prices[row][t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchSolution {
    pub case_name: String,
    pub horizon: usize,
    pub period_hours: f64,
    pub participant_output: Vec<Vec<f64>>,
    /// Net participant injection per bus, `P` (MW).
    pub bus_injection: Vec<Vec<f64>>,
    /// Storage power per unit, `U` (MW).
    pub storage_power: Vec<Vec<f64>>,
    /// Storage power aggregated per bus (MW).
    pub bus_storage: Vec<Vec<f64>>,
    /// Discharge `q(u)` per storage (hm³ for hydro, MWh for batteries).
    pub discharge: Vec<Vec<f64>>,
    /// Stored quantity after each period.
    pub storage_level: Vec<Vec<f64>>,
    /// Directed line flows (MW), rows `0..m` forward and `m..2m` reverse.
    pub flows: Vec<Vec<f64>>,
    pub objective: f64,
    /// System energy price γ ($/MWh).
    pub energy_price: Vec<f64>,
    /// Directed flow-limit shadow prices μ ($/MWh).
    pub flow_prices: Vec<Vec<f64>>,
    /// Upper storage-level shadow prices η̂ ($ per unit stored).
    pub storage_upper_prices: Vec<Vec<f64>>,
    /// Lower storage-level shadow prices η̌ ($ per unit stored).
    pub storage_lower_prices: Vec<Vec<f64>>,
    /// Marginal value of storage power from storage-side multipliers ($/MWh).
    pub storage_values: Vec<Vec<f64>>,
    /// Dual of the energy-target row, when one was imposed.
    pub energy_target_prices: BTreeMap<usize, f64>,
    /// Locational marginal prices Λ ($/MWh).
    pub lmp: Vec<Vec<f64>>,
    pub status: QpStatus,
    pub residuals: KktResiduals,
    pub iterations: usize,
}

pub fn solve_mped(case: &MpedCase) -> Result<DispatchSolution, DispatchError> {
    solve_with(case, &BTreeMap::new())
}

pub fn solve_with(case: &MpedCase, directives: &BTreeMap<usize, StorageDirective>) -> Result<DispatchSolution, DispatchError> {
    let dp = assemble_with(case, directives)?;
    let sol = qp::solve_qp(&dp.program, case.tolerance)?;
    match sol.status {
        QpStatus::Optimal => {}
        QpStatus::Infeasible => {
            let report = sol.certificate.as_ref().expect("infeasible solutions carry a certificate");
            let names: Vec<String> = report
                .conflict
                .iter()
                .map(|c| match c.constraint {
                    ConstraintRef::Equality(k) => dp.equality_labels[k].describe(case),
                    ConstraintRef::Inequality(k) => dp.inequality_labels[k].describe(case),
                })
                .collect();
            return Err(DispatchError::Infeasible {
                row: names.first().cloned().unwrap_or_else(|| "variable limits".into()),
                violation: report.max_violation,
                conflict: names,
            });
        }
        status => {
            return Err(DispatchError::NotSolved {
                status,
                residual: sol.residuals.max(),
            })
        }
    }

    let t_len = case.horizon;
    let dt = case.period_hours;
    let n_bus = case.grid.num_buses();
    let x = &sol.x;
    let participant_output: Vec<Vec<f64>> = (0..case.num_participants())
        .map(|j| (0..t_len).map(|t| x[dp.participant_var(j, t)]).collect())
        .collect();
    let storage_power: Vec<Vec<f64>> = (0..case.num_storages())
        .map(|s| (0..t_len).map(|t| x[dp.storage_var(s, t)]).collect())
        .collect();
    let mut bus_injection = vec![vec![0.0; t_len]; n_bus];
    for (p, out) in case.participants.iter().zip(&participant_output) {
        for t in 0..t_len {
            bus_injection[p.bus][t] += out[t];
        }
    }
    let mut bus_storage = vec![vec![0.0; t_len]; n_bus];
    for (unit, out) in case.storages.iter().zip(&storage_power) {
        for t in 0..t_len {
            bus_storage[unit.bus][t] += out[t];
        }
    }

    let topology = case.topology()?;
    let mut discharge = Vec::with_capacity(case.num_storages());
    for (unit, u) in case.storages.iter().zip(&storage_power) {
        let conversion = unit.conversion(dt);
        let (lo, hi) = conversion.power_bounds();
        let clipped: Vec<f64> = u.iter().map(|v| v.clamp(lo, hi)).collect();
        discharge.push(conversion_series(&conversion, &clipped)?);
    }
    let storage_level = (0..case.num_storages())
        .map(|s| storage_trajectory(&case.storages[s].reservoir, &topology, s, &discharge))
        .collect::<Result<Vec<_>, _>>()?;

    let g = case.grid.shift_factors();
    let m2 = case.grid.num_directed();
    let mut flows = vec![vec![0.0; t_len]; m2];
    for t in 0..t_len {
        let inj = DVector::from_fn(n_bus, |b, _| bus_injection[b][t] + bus_storage[b][t]);
        let f = g * inj;
        for l in 0..m2 {
            flows[l][t] = f[l];
        }
    }

    let energy_price: Vec<f64> = (0..t_len).map(|t| sol.eq_duals[t] / dt).collect();
    let mut energy_target_prices = BTreeMap::new();
    for (k, label) in dp.equality_labels.iter().enumerate() {
        if let RowLabel::EnergyTarget { storage } = label {
            energy_target_prices.insert(*storage, sol.eq_duals[k]);
        }
    }
    let mut flow_prices = vec![vec![0.0; t_len]; m2];
    let mut storage_upper_prices = vec![vec![0.0; t_len]; case.num_storages()];
    let mut storage_lower_prices = vec![vec![0.0; t_len]; case.num_storages()];
    for (k, label) in dp.inequality_labels.iter().enumerate() {
        let mu = sol.ineq_duals[k];
        match *label {
            RowLabel::Flow { line, direction, period } => {
                let row = if direction == Direction::Forward { line } else { line + m2 / 2 };
                flow_prices[row][period] = mu / dt;
            }
            RowLabel::StorageUpper { storage, period } => storage_upper_prices[storage][period] = mu,
            RowLabel::StorageLower { storage, period } => storage_lower_prices[storage][period] = mu,
            _ => {}
        }
    }

    // Storage-side stationarity: Δt·λ at the storage bus equals the sum of
    // storage-row, power-bound and energy-target multiplier terms.
    let jacobian = dp.program.ineq_jacobian(x);
    let mut storage_values = vec![vec![0.0; t_len]; case.num_storages()];
    for s in 0..case.num_storages() {
        for t in 0..t_len {
            let v = dp.storage_var(s, t);
            let mut value = sol.upper_duals[v] - sol.lower_duals[v];
            for (k, label) in dp.inequality_labels.iter().enumerate() {
                if matches!(label, RowLabel::StorageUpper { .. } | RowLabel::StorageLower { .. }) {
                    value += sol.ineq_duals[k] * jacobian[(k, v)];
                }
            }
            if let Some(nu) = energy_target_prices.get(&s) {
                value -= nu * dt;
            }
            storage_values[s][t] = value / dt;
        }
    }

    let mut solution = DispatchSolution {
        case_name: case.name.clone(),
        horizon: t_len,
        period_hours: dt,
        participant_output,
        bus_injection,
        storage_power,
        bus_storage,
        discharge,
        storage_level,
        flows,
        objective: sol.objective,
        energy_price,
        flow_prices,
        storage_upper_prices,
        storage_lower_prices,
        storage_values,
        energy_target_prices,
        lmp: Vec::new(),
        status: sol.status,
        residuals: sol.residuals,
        iterations: sol.iterations,
    };
    solution.lmp = lmps(&solution, &case.grid);
    Ok(solution)
}

/// `λ[t] = γₜ·1 − Gᵀμ[t]`, recomputed from the reported duals.
pub fn lmps(solution: &DispatchSolution, grid: &GridModel) -> Vec<Vec<f64>> {
    let g = grid.shift_factors();
    let t_len = solution.horizon;
    let mut lmp = vec![vec![0.0; t_len]; grid.num_buses()];
    for t in 0..t_len {
        let mu = DVector::from_fn(grid.num_directed(), |l, _| solution.flow_prices[l][t]);
        let congestion = g.tr_mul(&mu);
        for (b, row) in lmp.iter_mut().enumerate() {
            row[t] = solution.energy_price[t] - congestion[b];
        }
    }
    lmp
}

/// Merchandising surplus and its dual decomposition (all in $).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurplusBreakdown {
    /// `−Σₜ Δt λ[t]ᵀp[t]`.
    pub surplus: f64,
    /// `Σₜ Δt μ[t]ᵀG(p[t] + u[t])`, congestion rent on the network.
    pub flow_term: f64,
    /// `Σₜ Δt Σₛ πₛₜ uₛₜ`, rent on storage-side constraints.
    pub storage_term: f64,
}

impl SurplusBreakdown {
    pub fn decomposition(&self) -> f64 {
        self.flow_term + self.storage_term
    }
}

pub fn merchandising_surplus(solution: &DispatchSolution) -> Result<SurplusBreakdown, DispatchError> {
    let dt = solution.period_hours;
    let mut surplus = 0.0;
    for (lmp_b, p_b) in solution.lmp.iter().zip(&solution.bus_injection) {
        for t in 0..solution.horizon {
            surplus -= dt * lmp_b[t] * p_b[t];
        }
    }
    let mut flow_term = 0.0;
    for (mu_l, f_l) in solution.flow_prices.iter().zip(&solution.flows) {
        for t in 0..solution.horizon {
            flow_term += dt * mu_l[t] * f_l[t];
        }
    }
    let mut storage_term = 0.0;
    for (pi_s, u_s) in solution.storage_values.iter().zip(&solution.storage_power) {
        for t in 0..solution.horizon {
            storage_term += dt * pi_s[t] * u_s[t];
        }
    }
    let breakdown = SurplusBreakdown {
        surplus,
        flow_term,
        storage_term,
    };
    if (surplus - breakdown.decomposition()).abs() > 1e-5 * (1.0 + surplus.abs()) {
        return Err(DispatchError::Inconsistent {
            surplus,
            decomposition: breakdown.decomposition(),
        });
    }
    Ok(breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Line;

    fn copper_plate() -> GridModel {
        GridModel::new(1, vec![], 0).unwrap()
    }

    #[test]
    fn fixed_load_forces_output() {
        let case = MpedCase::new(
            copper_plate(),
            vec![
                Participant::generator("g", 0, 0.0, 0.0, 100.0, 1),
                Participant::fixed_load("d", 0, &[10.0]),
            ],
            vec![],
            1,
            1.0,
        );
        let sol = solve_mped(&case).unwrap();
        assert!((sol.participant_output[0][0] - 10.0).abs() < 1e-7);
    }

    #[test]
    fn no_load_with_positive_minimum_is_infeasible() {
        let mut g = Participant::generator("g", 0, 0.0, 1.0, 100.0, 1);
        g.cost.min = vec![5.0];
        let case = MpedCase::new(copper_plate(), vec![g], vec![], 1, 1.0);
        match solve_mped(&case) {
            Err(DispatchError::Infeasible { row, .. }) => assert!(row.contains("balance"), "{row}"),
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn congestion_splits_generation() {
        let grid = GridModel::new(2, vec![Line::symmetric(0, 1, 0.1, 50.0)], 0).unwrap();
        let case = MpedCase::new(
            grid,
            vec![
                Participant::generator("cheap", 0, 0.0, 10.0, 100.0, 1),
                Participant::generator("dear", 1, 0.0, 12.0, 100.0, 1),
                Participant::fixed_load("d", 1, &[80.0]),
            ],
            vec![],
            1,
            1.0,
        );
        let sol = solve_mped(&case).unwrap();
        assert!((sol.participant_output[0][0] - 50.0).abs() < 1e-6);
        assert!((sol.participant_output[1][0] - 30.0).abs() < 1e-6);
        assert!((sol.lmp[0][0] - 10.0).abs() < 1e-6 && (sol.lmp[1][0] - 12.0).abs() < 1e-6);
        let ms = merchandising_surplus(&sol).unwrap();
        assert!((ms.surplus - 100.0).abs() < 1e-5);
    }

    #[test]
    fn rejects_structural_errors() {
        let case = MpedCase::new(
            copper_plate(),
            vec![Participant::generator("g", 3, 0.0, 1.0, 1.0, 1)],
            vec![],
            1,
            1.0,
        );
        assert!(matches!(solve_mped(&case), Err(DispatchError::InvalidCase { .. })));
        let case = MpedCase::new(
            copper_plate(),
            vec![Participant::generator("g", 0, 0.0, 1.0, 1.0, 2)],
            vec![],
            1,
            1.0,
        );
        assert!(matches!(solve_mped(&case), Err(DispatchError::InvalidCase { .. })));
    }
}
