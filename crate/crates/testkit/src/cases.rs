//! Randomized dispatch cases and portfolios.
//!
//! Every generated case is feasible with zero line flows and idle storage:
//! each bus has a local generator covering its fixed load, and reservoir
//! bounds admit the no-release trajectory.

use rand::seq::SliceRandom;
use rand::Rng;
use storage_rights::dispatch::{Direction, MpedCase, Participant, StorageTechnology, StorageUnit};
use storage_rights::grid::{GridModel, Line};
use storage_rights::hydro::{calibrate, PlantPhysics};
use storage_rights::reservoir::{ReservoirSpec, UpstreamLink};
use storage_rights::rights::{Portfolio, Right, RightKind};

#[derive(Debug, Clone, Copy)]
pub struct CaseShape {
    pub max_buses: usize,
    pub max_horizon: usize,
    pub max_storages: usize,
    pub allow_hydro: bool,
}

impl Default for CaseShape {
    fn default() -> Self {
        Self {
            max_buses: 4,
            max_horizon: 3,
            max_storages: 2,
            allow_hydro: true,
        }
    }
}

pub fn random_grid<R: Rng>(rng: &mut R, buses: usize) -> GridModel {
    let mut lines = Vec::new();
    for b in 1..buses {
        let parent = rng.gen_range(0..b);
        lines.push(Line::symmetric(parent, b, rng.gen_range(0.05..0.5), rng.gen_range(5.0..40.0)));
    }
    if buses >= 3 && rng.gen_bool(0.5) {
        let a = rng.gen_range(0..buses);
        let mut b = rng.gen_range(0..buses);
        while b == a {
            b = rng.gen_range(0..buses);
        }
        lines.push(Line::symmetric(a, b, rng.gen_range(0.05..0.5), rng.gen_range(5.0..40.0)));
    }
    GridModel::new(buses, lines, rng.gen_range(0..buses)).unwrap()
}

fn random_series<R: Rng>(rng: &mut R, horizon: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..horizon).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn random_hydro_physics<R: Rng>(rng: &mut R) -> PlantPhysics {
    let tailrace_intercept = rng.gen_range(10.0..40.0);
    let gross_head = rng.gen_range(5.0..40.0);
    PlantPhysics {
        efficiency: rng.gen_range(0.5..2.0),
        forebay_height: tailrace_intercept + gross_head,
        tailrace_intercept,
        tailrace_slope: if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.001..0.2) },
        head_loss: rng.gen_range(0.0..0.5 * gross_head.min(tailrace_intercept)),
        capacity: rng.gen_range(5.0..30.0),
    }
}

fn random_storage<R: Rng>(rng: &mut R, s: usize, buses: usize, horizon: usize, hydro: bool, upstream: Vec<UpstreamLink>) -> StorageUnit {
    let lower_level = rng.gen_range(0.0..5.0);
    let initial = lower_level + rng.gen_range(0.0..10.0);
    let (technology, inflow) = if hydro {
        let plant = calibrate(&random_hydro_physics(rng)).unwrap();
        (StorageTechnology::Hydro { plant }, random_series(rng, horizon, 0.0, 2.0))
    } else {
        (
            StorageTechnology::Ess {
                max_charge: rng.gen_range(2.0..10.0),
                max_discharge: rng.gen_range(2.0..10.0),
            },
            vec![0.0; horizon],
        )
    };
    let total_inflow: f64 = inflow.iter().sum();
    let headroom = rng.gen_range(1.0..12.0);
    StorageUnit {
        name: format!("s{s}"),
        bus: rng.gen_range(0..buses),
        technology,
        reservoir: ReservoirSpec {
            initial,
            lower: vec![lower_level; horizon],
            upper: vec![initial + total_inflow + headroom; horizon],
            inflow,
        },
        upstream,
    }
}

pub fn random_case<R: Rng>(rng: &mut R, shape: CaseShape) -> MpedCase {
    let buses = rng.gen_range(1..=shape.max_buses);
    let horizon = rng.gen_range(1..=shape.max_horizon);
    let period_hours = *[1.0, 0.5, 2.0].choose(rng).unwrap();
    let grid = random_grid(rng, buses);
    let mut participants = Vec::new();
    for b in 0..buses {
        let demand = random_series(rng, horizon, 0.0, 40.0);
        let peak = demand.iter().cloned().fold(0.0, f64::max);
        participants.push(Participant::fixed_load(&format!("d{b}"), b, &demand));
        participants.push(Participant::generator(
            &format!("g{b}"),
            b,
            rng.gen_range(0.0..0.1),
            rng.gen_range(15.0..40.0),
            peak + rng.gen_range(1.0..20.0),
            horizon,
        ));
    }
    for k in 0..rng.gen_range(1..=2) {
        participants.push(Participant::generator(
            &format!("cheap{k}"),
            rng.gen_range(0..buses),
            rng.gen_range(0.0..0.05),
            rng.gen_range(5.0..15.0),
            rng.gen_range(20.0..80.0),
            horizon,
        ));
    }
    if rng.gen_bool(0.5) {
        participants.push(Participant::load(
            "elastic",
            rng.gen_range(0..buses),
            rng.gen_range(0.0..0.05),
            rng.gen_range(20.0..60.0),
            rng.gen_range(1.0..20.0),
            horizon,
        ));
    }
    let mut storages: Vec<StorageUnit> = Vec::new();
    for s in 0..rng.gen_range(0..=shape.max_storages) {
        let hydro = shape.allow_hydro && rng.gen_bool(0.6);
        let upstream = match storages.last() {
            Some(prev) if hydro && matches!(prev.technology, StorageTechnology::Hydro { .. }) && rng.gen_bool(0.5) => {
                vec![UpstreamLink {
                    storage: s - 1,
                    lag: rng.gen_range(0..=1),
                }]
            }
            _ => Vec::new(),
        };
        storages.push(random_storage(rng, s, buses, horizon, hydro, upstream));
    }
    MpedCase::new(grid, participants, storages, horizon, period_hours)
}

/// Random rights of every applicable kind; not necessarily issuable.
pub fn random_portfolio<R: Rng>(rng: &mut R, case: &MpedCase, count: usize) -> Portfolio {
    let n = case.grid.num_buses();
    let m = case.grid.num_lines();
    let t_len = case.horizon;
    let mut rights = Vec::new();
    for k in 0..count {
        let choice = rng.gen_range(0..4);
        let (kind, profile) = match choice {
            0 if n >= 2 => {
                let from = rng.gen_range(0..n);
                let mut to = rng.gen_range(0..n);
                while to == from {
                    to = rng.gen_range(0..n);
                }
                (RightKind::Ftr { from, to }, random_series(rng, t_len, -20.0, 20.0))
            }
            1 if m >= 1 => {
                let line = rng.gen_range(0..m);
                let direction = if rng.gen_bool(0.5) {
                    Direction::Forward
                } else {
                    Direction::Reverse
                };
                (RightKind::Fgr { line, direction }, random_series(rng, t_len, 0.0, 15.0))
            }
            2 if !case.storages.is_empty() => {
                let storage = rng.gen_range(0..case.storages.len());
                (
                    RightKind::Fsr {
                        storage,
                        bus: rng.gen_range(0..n),
                    },
                    random_series(rng, t_len, -10.0, 10.0),
                )
            }
            3 if !case.storages.is_empty() => {
                let storage = rng.gen_range(0..case.storages.len());
                (RightKind::Ecr { storage }, random_series(rng, t_len, 0.0, 5.0))
            }
            _ => {
                let bus = rng.gen_range(0..n);
                (
                    RightKind::Ftr {
                        from: bus,
                        to: (bus + 1) % n,
                    },
                    random_series(rng, t_len, -5.0, 5.0),
                )
            }
        };
        rights.push(Right {
            id: format!("r{k}"),
            holder: format!("h{}", k % 3),
            kind,
            profile,
        });
    }
    Portfolio::new(rights)
}

pub fn scaled(portfolio: &Portfolio, factor: f64) -> Portfolio {
    let mut out = portfolio.clone();
    for r in &mut out.rights {
        for v in &mut r.profile {
            *v *= factor;
        }
    }
    out
}
