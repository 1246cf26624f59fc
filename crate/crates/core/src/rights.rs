//! Financial transmission and storage rights.
//!
//! Four kinds of right are settled against an optimal dispatch:
//!
//! | kind | endpoints | rent ($) |
//! |------|-----------|----------|
//! | FTR  | injection bus `i`, withdrawal bus `k` | `Σₜ Δt (λₖₜ − λᵢₜ) rₜ` |
//! | FGR  | directed line `l` | `Σₜ Δt μₗₜ fₜ` |
//! | FSR  | backing storage, withdrawal bus `k` | `Σₜ Δt λₖₜ sₜ` |
//! | ECR  | storage `i` | `Σₜ η̂ᵢₜ eₜ` |
//!
//! A portfolio may be issued when the simultaneous feasibility test finds
//! storage schedules `u′` with
//! `1ᵀ(R − S + u′) = 0`, `G(R − S + u′) ≤ d − F` and storage levels within
//! `[ž, ẑ − E]`, using the same convexified storage rows as the dispatch.
//! Under that test the settled rents never exceed the merchandising surplus.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispatch::{
    build_program, merchandising_surplus, solve_with, storage_rows, Direction, DispatchError, DispatchSolution, MpedCase, RowLabel,
    SparseRow, StorageDirective,
};
use crate::qp::{self, ConstraintRef, QpError, QpOptions};
use crate::reservoir::StorageKind;

/// Largest phase-one violation (in row units) accepted as feasible.
pub const SFT_TOLERANCE: f64 = 1e-6;

/// Relative slack allowed when comparing rents with the surplus.
pub const ADEQUACY_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RightsError {
    #[error("right {id}: {reason}")]
    InvalidRight { id: String, reason: String },
    #[error("right {id} is a {found}, expected a {expected}")]
    WrongKind {
        id: String,
        expected: &'static str,
        found: &'static str,
    },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("revenue adequacy violated: rents {rents} exceed merchandising surplus {surplus}")]
    AdequacyViolated {
        rents: f64,
        surplus: f64,
        report: Box<SettlementReport>,
    },
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
    #[error(transparent)]
    Qp(#[from] QpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RightKind {
    Ftr { from: usize, to: usize },
    Fgr { line: usize, direction: Direction },
    Fsr { storage: usize, bus: usize },
    Ecr { storage: usize },
}

impl RightKind {
    pub fn name(&self) -> &'static str {
        match self {
            RightKind::Ftr { .. } => "ftr",
            RightKind::Fgr { .. } => "fgr",
            RightKind::Fsr { .. } => "fsr",
            RightKind::Ecr { .. } => "ecr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Right {
    pub id: String,
    pub holder: String,
    #[serde(flatten)]
    pub kind: RightKind,
    /// MW for FTR, FGR and FSR; stored units for ECR.
    pub profile: Vec<f64>,
}

impl Right {
    pub fn validate(&self, case: &MpedCase) -> Result<(), RightsError> {
        let fail = |reason: String| {
            Err(RightsError::InvalidRight {
                id: self.id.clone(),
                reason,
            })
        };
        if self.profile.len() != case.horizon {
            return fail(format!("profile has {} periods, expected {}", self.profile.len(), case.horizon));
        }
        if self.profile.iter().any(|v| !v.is_finite()) {
            return fail("profile values must be finite".into());
        }
        let n = case.grid.num_buses();
        let bus_ok = |b: usize| b < n;
        match self.kind {
            RightKind::Ftr { from, to } => {
                if !bus_ok(from) || !bus_ok(to) {
                    return fail(format!("bus {from} or {to} does not exist"));
                }
            }
            RightKind::Fgr { line, .. } => {
                if line >= case.grid.num_lines() {
                    return fail(format!("line {line} does not exist"));
                }
                if self.profile.iter().any(|v| *v < 0.0) {
                    return fail("flowgate profile must be nonnegative".into());
                }
            }
            RightKind::Fsr { storage, bus } => {
                if storage >= case.num_storages() {
                    return fail(format!("storage {storage} does not exist"));
                }
                if !bus_ok(bus) {
                    return fail(format!("bus {bus} does not exist"));
                }
            }
            RightKind::Ecr { storage } => {
                if storage >= case.num_storages() {
                    return fail(format!("storage {storage} does not exist"));
                }
                if self.profile.iter().any(|v| *v < 0.0) {
                    return fail("energy capacity profile must be nonnegative".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Portfolio {
    pub rights: Vec<Right>,
}

impl Portfolio {
    pub fn new(rights: Vec<Right>) -> Self {
        Self { rights }
    }

    pub fn validate(&self, case: &MpedCase) -> Result<(), RightsError> {
        self.rights.iter().try_for_each(|r| r.validate(case))
    }
}

/// Portfolio totals, entity-major like [`DispatchSolution`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    /// Net FTR injections `R` (n × T).
    pub injection: Vec<Vec<f64>>,
    /// Flowgate reservations `F` (2m × T).
    pub flow: Vec<Vec<f64>>,
    /// FSR withdrawals `S` (n × T).
    pub withdrawal: Vec<Vec<f64>>,
    /// Energy capacity reservations `E` (storages × T).
    pub energy: Vec<Vec<f64>>,
}

pub fn aggregate(portfolio: &Portfolio, case: &MpedCase) -> Result<Aggregates, RightsError> {
    portfolio.validate(case)?;
    let t_len = case.horizon;
    let m = case.grid.num_lines();
    let mut agg = Aggregates {
        injection: vec![vec![0.0; t_len]; case.grid.num_buses()],
        flow: vec![vec![0.0; t_len]; 2 * m],
        withdrawal: vec![vec![0.0; t_len]; case.grid.num_buses()],
        energy: vec![vec![0.0; t_len]; case.num_storages()],
    };
    for right in &portfolio.rights {
        for (t, &v) in right.profile.iter().enumerate() {
            match right.kind {
                RightKind::Ftr { from, to } => {
                    agg.injection[from][t] += v;
                    agg.injection[to][t] -= v;
                }
                RightKind::Fgr { line, direction } => {
                    let row = if direction == Direction::Forward { line } else { line + m };
                    agg.flow[row][t] += v;
                }
                RightKind::Fsr { bus, .. } => agg.withdrawal[bus][t] += v,
                RightKind::Ecr { storage } => agg.energy[storage][t] += v,
            }
        }
    }
    Ok(agg)
}

fn expect_kind(right: &Right, expected: &'static str) -> Result<(), RightsError> {
    if right.kind.name() == expected {
        Ok(())
    } else {
        Err(RightsError::WrongKind {
            id: right.id.clone(),
            expected,
            found: right.kind.name(),
        })
    }
}

pub fn ftr_rent(right: &Right, sol: &DispatchSolution) -> Result<f64, RightsError> {
    expect_kind(right, "ftr")?;
    let RightKind::Ftr { from, to } = right.kind else { unreachable!() };
    Ok((0..sol.horizon)
        .map(|t| sol.period_hours * (sol.lmp[to][t] - sol.lmp[from][t]) * right.profile[t])
        .sum())
}

pub fn fgr_rent(right: &Right, sol: &DispatchSolution) -> Result<f64, RightsError> {
    expect_kind(right, "fgr")?;
    let RightKind::Fgr { line, direction } = right.kind else {
        unreachable!()
    };
    let row = if direction == Direction::Forward {
        line
    } else {
        line + sol.flow_prices.len() / 2
    };
    Ok((0..sol.horizon)
        .map(|t| sol.period_hours * sol.flow_prices[row][t] * right.profile[t])
        .sum())
}

pub fn fsr_rent(right: &Right, sol: &DispatchSolution) -> Result<f64, RightsError> {
    expect_kind(right, "fsr")?;
    let RightKind::Fsr { bus, .. } = right.kind else { unreachable!() };
    Ok((0..sol.horizon)
        .map(|t| sol.period_hours * sol.lmp[bus][t] * right.profile[t])
        .sum())
}

pub fn ecr_rent(right: &Right, sol: &DispatchSolution) -> Result<f64, RightsError> {
    expect_kind(right, "ecr")?;
    let RightKind::Ecr { storage } = right.kind else { unreachable!() };
    Ok((0..sol.horizon)
        .map(|t| sol.storage_upper_prices[storage][t] * right.profile[t])
        .sum())
}

pub fn rent(right: &Right, sol: &DispatchSolution) -> Result<f64, RightsError> {
    match right.kind {
        RightKind::Ftr { .. } => ftr_rent(right, sol),
        RightKind::Fgr { .. } => fgr_rent(right, sol),
        RightKind::Fsr { .. } => fsr_rent(right, sol),
        RightKind::Ecr { .. } => ecr_rent(right, sol),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RightRent {
    pub id: String,
    pub holder: String,
    pub kind: String,
    pub rent: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KindTotals {
    pub ftr: f64,
    pub fgr: f64,
    pub fsr: f64,
    pub ecr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettlementReport {
    pub rents: Vec<RightRent>,
    pub totals: KindTotals,
    pub total_rent: f64,
    pub merchandising_surplus: f64,
    /// Operator revenue from storage dispatch, `−Σₜ Δt λᵀu`; not part of the
    /// adequacy comparison.
    pub storage_settlement: f64,
    /// `merchandising_surplus − total_rent`.
    pub slack: f64,
    pub adequate: bool,
}

/// Settles every right and compares the total with the surplus.
pub fn settle(case: &MpedCase, sol: &DispatchSolution, portfolio: &Portfolio) -> Result<SettlementReport, RightsError> {
    portfolio.validate(case)?;
    let surplus = merchandising_surplus(sol)?.surplus;
    let mut rents = Vec::with_capacity(portfolio.rights.len());
    let mut totals = KindTotals::default();
    let mut total_rent = 0.0;
    for right in &portfolio.rights {
        let value = rent(right, sol)?;
        match right.kind {
            RightKind::Ftr { .. } => totals.ftr += value,
            RightKind::Fgr { .. } => totals.fgr += value,
            RightKind::Fsr { .. } => totals.fsr += value,
            RightKind::Ecr { .. } => totals.ecr += value,
        }
        total_rent += value;
        rents.push(RightRent {
            id: right.id.clone(),
            holder: right.holder.clone(),
            kind: right.kind.name().into(),
            rent: value,
        });
    }
    let mut storage_settlement = 0.0;
    for (unit, u) in case.storages.iter().zip(&sol.storage_power) {
        for t in 0..sol.horizon {
            storage_settlement -= sol.period_hours * sol.lmp[unit.bus][t] * u[t];
        }
    }
    let slack = surplus - total_rent;
    Ok(SettlementReport {
        rents,
        totals,
        total_rent,
        merchandising_surplus: surplus,
        storage_settlement,
        slack,
        adequate: slack >= -ADEQUACY_TOLERANCE * (1.0 + surplus.abs()),
    })
}

/// Settles the portfolio and fails when rents exceed the surplus.
pub fn revenue_adequacy_check(case: &MpedCase, sol: &DispatchSolution, portfolio: &Portfolio) -> Result<SettlementReport, RightsError> {
    let report = settle(case, sol, portfolio)?;
    if !report.adequate {
        return Err(RightsError::AdequacyViolated {
            rents: report.total_rent,
            surplus: report.merchandising_surplus,
            report: Box::new(report),
        });
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolatedRow {
    pub label: RowLabel,
    pub description: String,
    pub violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftOutcome {
    pub feasible: bool,
    /// Smallest achievable largest row violation.
    pub max_violation: f64,
    /// Storage schedules backing the portfolio (storages × T), when feasible.
    pub witness: Option<Vec<Vec<f64>>>,
    /// Rows implicated in infeasibility, most important first.
    pub violated: Vec<ViolatedRow>,
}

fn violated(case: &MpedCase, label: RowLabel, violation: f64) -> ViolatedRow {
    ViolatedRow {
        label,
        description: label.describe(case),
        violation,
    }
}

/// Decides whether the portfolio can be issued on `case`.
pub fn simultaneous_feasibility_test(case: &MpedCase, portfolio: &Portfolio) -> Result<SftOutcome, RightsError> {
    let topology = case.validate()?;
    let agg = aggregate(portfolio, case)?;
    let t_len = case.horizon;
    let m = case.grid.num_lines();
    let n_bus = case.grid.num_buses();
    let ns = case.num_storages();
    let mut violations = Vec::new();

    let d = case.grid.capacities();
    for l in 0..2 * m {
        for t in 0..t_len {
            let remaining = d[l] - agg.flow[l][t];
            if remaining < 0.0 {
                let label = RowLabel::Flow {
                    line: l % m,
                    direction: if l < m { Direction::Forward } else { Direction::Reverse },
                    period: t,
                };
                violations.push(violated(case, label, -remaining));
            }
        }
    }
    for (s, unit) in case.storages.iter().enumerate() {
        for t in 0..t_len {
            let gap = unit.reservoir.upper[t] - agg.energy[s][t] - unit.reservoir.lower[t];
            if gap < 0.0 {
                violations.push(violated(case, RowLabel::StorageUpper { storage: s, period: t }, -gap));
            }
        }
    }
    if !violations.is_empty() {
        violations.sort_by(|a, b| b.violation.total_cmp(&a.violation));
        return Ok(SftOutcome {
            feasible: false,
            max_violation: violations[0].violation,
            witness: None,
            violated: violations,
        });
    }

    let g = case.grid.shift_factors();
    let var = |s: usize, t: usize| s * t_len + t;
    let mut equalities = Vec::with_capacity(t_len);
    let mut inequalities = Vec::new();
    for t in 0..t_len {
        let x = DVector::from_fn(n_bus, |b, _| agg.injection[b][t] - agg.withdrawal[b][t]);
        equalities.push(SparseRow {
            label: RowLabel::Balance { period: t },
            linear: (0..ns).map(|s| (var(s, t), 1.0)).collect(),
            quadratic: Vec::new(),
            rhs: -x.sum(),
        });
        let base = g * &x;
        for l in 0..2 * m {
            inequalities.push(SparseRow {
                label: RowLabel::Flow {
                    line: l % m,
                    direction: if l < m { Direction::Forward } else { Direction::Reverse },
                    period: t,
                },
                linear: (0..ns)
                    .map(|s| (var(s, t), g[(l, case.storages[s].bus)]))
                    .filter(|(_, c)| *c != 0.0)
                    .collect(),
                quadratic: Vec::new(),
                rhs: d[l] - agg.flow[l][t] - base[l],
            });
        }
    }
    inequalities.extend(storage_rows(case, &topology, var, Some(&agg.energy)));

    if ns == 0 {
        let mut rows: Vec<ViolatedRow> = equalities
            .iter()
            .map(|r| violated(case, r.label, r.rhs.abs()))
            .chain(inequalities.iter().map(|r| violated(case, r.label, (-r.rhs).max(0.0))))
            .filter(|v| v.violation > 0.0)
            .collect();
        rows.sort_by(|a, b| b.violation.total_cmp(&a.violation));
        let max_violation = rows.first().map_or(0.0, |r| r.violation);
        let feasible = max_violation <= SFT_TOLERANCE;
        return Ok(SftOutcome {
            feasible,
            max_violation,
            witness: feasible.then(Vec::new),
            violated: if feasible { Vec::new() } else { rows },
        });
    }

    let n = ns * t_len;
    let mut lower = vec![0.0; n];
    let mut upper = vec![0.0; n];
    for (s, unit) in case.storages.iter().enumerate() {
        let (lo, hi) = unit.conversion(case.period_hours).power_bounds();
        for t in 0..t_len {
            lower[var(s, t)] = lo;
            upper[var(s, t)] = hi;
        }
    }
    let program = build_program(n, &vec![0.0; n], &vec![0.0; n], &equalities, &inequalities, &lower, &upper)?;
    let report = qp::minimize_max_violation(
        &program,
        &QpOptions {
            tolerance: case.tolerance,
            ..QpOptions::default()
        },
    )?;
    let feasible = report.max_violation <= SFT_TOLERANCE;
    let witness = feasible.then(|| (0..ns).map(|s| (0..t_len).map(|t| report.point[var(s, t)]).collect()).collect());
    let rows = if feasible {
        Vec::new()
    } else {
        report
            .conflict
            .iter()
            .map(|c| {
                let label = match c.constraint {
                    ConstraintRef::Equality(k) => equalities[k].label,
                    ConstraintRef::Inequality(k) => inequalities[k].label,
                };
                violated(case, label, c.violation)
            })
            .collect()
    };
    Ok(SftOutcome {
        feasible,
        max_violation: report.max_violation,
        witness,
        violated: rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FsrValuation {
    pub storage: usize,
    pub daily_energy: f64,
    /// Constant power schedule delivering the daily energy (MW).
    pub flat_schedule: Vec<f64>,
    /// Schedule chosen when the same energy may be moved between periods.
    pub reallocated_schedule: Vec<f64>,
    pub flat_objective: f64,
    pub reallocated_objective: f64,
    /// `flat_objective − reallocated_objective` ($).
    pub valuation: f64,
    pub flat_lmp: Vec<Vec<f64>>,
    pub reallocated_lmp: Vec<Vec<f64>>,
}

/// Values the freedom to move a storage unit's daily energy between periods.
pub fn value_fsr_flat_bid_reallocation(case: &MpedCase, storage: usize, daily_energy: f64) -> Result<FsrValuation, RightsError> {
    case.validate()?;
    let unit = case
        .storages
        .get(storage)
        .ok_or_else(|| RightsError::Precondition(format!("storage {storage} does not exist")))?;
    let t_len = case.horizon;
    let dt = case.period_hours;
    let flat = daily_energy / (t_len as f64 * dt);
    let (lo, hi) = unit.conversion(dt).power_bounds();
    if !(flat >= lo && flat <= hi) {
        return Err(RightsError::Precondition(format!(
            "flat power {flat} MW for storage {} is outside its limits [{lo}, {hi}]",
            unit.name
        )));
    }
    if unit.kind() == StorageKind::Hydro && flat < 0.0 {
        return Err(RightsError::Precondition("hydro energy must be nonnegative".into()));
    }
    let flat_schedule = vec![flat; t_len];
    let fixed = BTreeMap::from([(storage, StorageDirective::Fixed(flat_schedule.clone()))]);
    let first = match solve_with(case, &fixed) {
        Ok(sol) => sol,
        Err(DispatchError::Infeasible { row, .. }) => {
            return Err(RightsError::Precondition(format!(
                "flat schedule for storage {} is not deliverable: {row}",
                unit.name
            )))
        }
        Err(e) => return Err(e.into()),
    };
    let total = BTreeMap::from([(storage, StorageDirective::TotalEnergy(daily_energy))]);
    let second = solve_with(case, &total)?;
    Ok(FsrValuation {
        storage,
        daily_energy,
        flat_schedule,
        reallocated_schedule: second.storage_power[storage].clone(),
        flat_objective: first.objective,
        reallocated_objective: second.objective,
        valuation: first.objective - second.objective,
        flat_lmp: first.lmp,
        reallocated_lmp: second.lmp,
    })
}
