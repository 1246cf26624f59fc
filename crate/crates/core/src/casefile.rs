//! TOML case files.
//!
//! ```toml
//! schema_version = 1
//! name = "two_bus_congested"
//!
//! [units]
//! volume = "hm3"
//! power = "MW"
//! time = "h"
//! price = "$/MWh"
//!
//! [horizon]
//! periods = 2
//! period_hours = 1.0
//!
//! [[buses]]
//! name = "A"
//!
//! [[participants]]
//! name = "gen"
//! bus = "A"
//! kind = "generator"
//! linear = 10.0
//! max = 100.0
//! ```
//!
//! Time series accept either a scalar (repeated over the horizon) or a list
//! with one value per period. Entities reference each other by name.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispatch::{
    CostFunction, Direction, DispatchError, MpedCase, Participant, ParticipantKind, StorageTechnology, StorageUnit, DEFAULT_TOLERANCE,
};
use crate::grid::{GridModel, Line};
use crate::hydro::{calibrate, forebay_height, PlantPhysics, ReservoirGeometry};
use crate::reservoir::{ReservoirError, ReservoirSpec, UpstreamLink};
use crate::rights::{Portfolio, Right, RightKind, RightsError};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable overriding the default solver tolerance.
pub const TOLERANCE_ENV: &str = "STORAGE_RIGHTS_TOLERANCE";

const BUNDLED: &[(&str, &str)] = &[
    ("two_bus_congested", include_str!("../cases/two_bus_congested.toml")),
    ("three_bus_triangle", include_str!("../cases/three_bus_triangle.toml")),
    ("ess_arbitrage", include_str!("../cases/ess_arbitrage.toml")),
    ("peak_offpeak_hydro", include_str!("../cases/peak_offpeak_hydro.toml")),
    ("hydro_cascade", include_str!("../cases/hydro_cascade.toml")),
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CaseError {
    #[error("{path}: cannot read file: {message}")]
    Io { path: String, message: String },
    #[error("{path}: parse error: {message}")]
    Parse { path: String, message: String },
    #[error("{path}: unsupported schema_version {found} (supported: {SCHEMA_VERSION})")]
    Version { path: String, found: u32 },
    #[error("{path}: {field}: {reason}")]
    Invalid { path: String, field: String, reason: String },
    #[error("unknown bundled case '{0}'")]
    UnknownBundled(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Series {
    Scalar(f64),
    List(Vec<f64>),
}

impl Series {
    fn expand(&self, horizon: usize) -> Result<Vec<f64>, String> {
        match self {
            Series::Scalar(v) => Ok(vec![*v; horizon]),
            Series::List(values) if values.len() == horizon => Ok(values.clone()),
            Series::List(values) => Err(format!("expected {horizon} values, found {}", values.len())),
        }
    }

    fn compress(values: &[f64]) -> Self {
        match values.first() {
            Some(&first) if values.iter().all(|v| v.to_bits() == first.to_bits()) => Series::Scalar(first),
            _ => Series::List(values.to_vec()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Units {
    pub volume: String,
    pub power: String,
    pub time: String,
    pub price: String,
}

impl Default for Units {
    fn default() -> Self {
        Self {
            volume: "hm3".into(),
            power: "MW".into(),
            time: "h".into(),
            price: "$/MWh".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonBlock {
    pub periods: usize,
    pub period_hours: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slack_bus: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusRecord {
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineRecord {
    pub from: String,
    pub to: String,
    pub reactance: f64,
    pub capacity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reverse_capacity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticipantRecord {
    pub name: String,
    pub bus: String,
    pub kind: ParticipantKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadratic: Option<Series>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linear: Option<Series>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<Series>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<Series>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demand: Option<Series>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TechnologyTag {
    Ess,
    Hydro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantRecord {
    pub efficiency: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forebay_height: Option<f64>,
    pub tailrace_intercept: f64,
    pub tailrace_slope: f64,
    #[serde(default)]
    pub head_loss: f64,
    pub capacity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpstreamRecord {
    pub storage: String,
    #[serde(default)]
    pub lag: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StorageRecord {
    pub name: String,
    pub bus: String,
    pub technology: TechnologyTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_charge: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_discharge: Option<f64>,
    pub initial: f64,
    pub lower: Series,
    pub upper: Series,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inflow: Option<Series>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub upstream: Vec<UpstreamRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plant: Option<PlantRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<ReservoirGeometry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RightTag {
    Ftr,
    Fgr,
    Fsr,
    Ecr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RightRecord {
    pub id: String,
    pub holder: String,
    pub kind: RightTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Direction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub storage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bus: Option<String>,
    pub profile: Series,
}

/// Raw document structure before cross-reference resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseFile {
    pub schema_version: u32,
    pub name: String,
    pub units: Units,
    pub horizon: HorizonBlock,
    #[serde(default)]
    pub settings: Settings,
    pub buses: Vec<BusRecord>,
    #[serde(default)]
    pub lines: Vec<LineRecord>,
    #[serde(default)]
    pub participants: Vec<ParticipantRecord>,
    #[serde(default)]
    pub storages: Vec<StorageRecord>,
    #[serde(default)]
    pub rights: Vec<RightRecord>,
}

/// A validated case with its (possibly empty) rights portfolio.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCase {
    pub case: MpedCase,
    pub portfolio: Portfolio,
}

pub fn bundled_names() -> impl Iterator<Item = &'static str> {
    BUNDLED.iter().map(|(name, _)| *name)
}

pub fn bundled_source(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

pub fn load_bundled(name: &str) -> Result<LoadedCase, CaseError> {
    let text = bundled_source(name).ok_or_else(|| CaseError::UnknownBundled(name.into()))?;
    parse_case(text, &format!("<bundled:{name}>"))
}

pub fn load_case(path: impl AsRef<Path>) -> Result<LoadedCase, CaseError> {
    let path = path.as_ref();
    let origin = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| CaseError::Io {
        path: origin.clone(),
        message: e.to_string(),
    })?;
    parse_case(&text, &origin)
}

/// Resolves a file path, falling back to a bundled case of that name.
pub fn load_case_or_bundled(reference: &str) -> Result<LoadedCase, CaseError> {
    if Path::new(reference).exists() || bundled_source(reference).is_none() {
        load_case(reference)
    } else {
        load_bundled(reference)
    }
}

pub fn parse_case(text: &str, origin: &str) -> Result<LoadedCase, CaseError> {
    let file: CaseFile = toml::from_str(text).map_err(|e| CaseError::Parse {
        path: origin.into(),
        message: e.to_string(),
    })?;
    Resolver { origin }.resolve(&file)
}

/// Standalone portfolio document: a schema version and `[[rights]]` records
/// naming buses and storages of the case they are issued against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortfolioFile {
    pub schema_version: u32,
    #[serde(default)]
    pub rights: Vec<RightRecord>,
}

pub fn parse_portfolio(text: &str, origin: &str, case: &MpedCase) -> Result<Portfolio, CaseError> {
    let file: PortfolioFile = toml::from_str(text).map_err(|e| CaseError::Parse {
        path: origin.into(),
        message: e.to_string(),
    })?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(CaseError::Version {
            path: origin.into(),
            found: file.schema_version,
        });
    }
    let buses: HashMap<&str, usize> = case.bus_names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let storages: HashMap<&str, usize> = case.storages.iter().enumerate().map(|(i, s)| (s.name.as_str(), i)).collect();
    Resolver { origin }.portfolio(&file.rights, case, &buses, &storages)
}

pub fn load_portfolio(path: impl AsRef<Path>, case: &MpedCase) -> Result<Portfolio, CaseError> {
    let path = path.as_ref();
    let origin = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| CaseError::Io {
        path: origin.clone(),
        message: e.to_string(),
    })?;
    parse_portfolio(&text, &origin, case)
}

/// Default solver tolerance, honouring [`TOLERANCE_ENV`].
pub fn default_tolerance() -> Result<f64, String> {
    match std::env::var(TOLERANCE_ENV) {
        Ok(raw) => match raw.trim().parse::<f64>() {
            Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
            _ => Err(format!("{TOLERANCE_ENV}={raw} is not a positive number")),
        },
        Err(_) => Ok(DEFAULT_TOLERANCE),
    }
}

struct Resolver<'a> {
    origin: &'a str,
}

impl Resolver<'_> {
    fn err(&self, field: impl Into<String>, reason: impl Into<String>) -> CaseError {
        CaseError::Invalid {
            path: self.origin.into(),
            field: field.into(),
            reason: reason.into(),
        }
    }

    fn series(&self, field: String, series: &Series, horizon: usize) -> Result<Vec<f64>, CaseError> {
        series.expand(horizon).map_err(|reason| self.err(field, reason))
    }

    fn lookup(&self, field: String, names: &HashMap<&str, usize>, name: &str, what: &str) -> Result<usize, CaseError> {
        names
            .get(name)
            .copied()
            .ok_or_else(|| self.err(field, format!("unknown {what} '{name}'")))
    }

    fn resolve(&self, file: &CaseFile) -> Result<LoadedCase, CaseError> {
        if file.schema_version != SCHEMA_VERSION {
            return Err(CaseError::Version {
                path: self.origin.into(),
                found: file.schema_version,
            });
        }
        let expected = Units::default();
        for (field, found, want) in [
            ("units.volume", &file.units.volume, &expected.volume),
            ("units.power", &file.units.power, &expected.power),
            ("units.time", &file.units.time, &expected.time),
            ("units.price", &file.units.price, &expected.price),
        ] {
            if found != want {
                return Err(self.err(field, format!("expected '{want}', found '{found}'")));
            }
        }
        let horizon = file.horizon.periods;
        if horizon == 0 {
            return Err(self.err("horizon.periods", "must be at least 1"));
        }
        if !(file.horizon.period_hours > 0.0) {
            return Err(self.err("horizon.period_hours", "must be positive"));
        }
        let tolerance = match file.settings.tolerance {
            Some(t) if t > 0.0 => t,
            Some(t) => return Err(self.err("settings.tolerance", format!("must be positive, got {t}"))),
            None => default_tolerance().map_err(|reason| self.err(TOLERANCE_ENV, reason))?,
        };

        if file.buses.is_empty() {
            return Err(self.err("buses", "at least one bus is required"));
        }
        let mut bus_index = HashMap::new();
        for (b, bus) in file.buses.iter().enumerate() {
            if bus_index.insert(bus.name.as_str(), b).is_some() {
                return Err(self.err(format!("buses[{b}].name"), format!("duplicate bus '{}'", bus.name)));
            }
        }
        let slack = match &file.settings.slack_bus {
            Some(name) => self.lookup("settings.slack_bus".into(), &bus_index, name, "bus")?,
            None => 0,
        };
        let mut lines = Vec::with_capacity(file.lines.len());
        for (l, rec) in file.lines.iter().enumerate() {
            lines.push(Line {
                from: self.lookup(format!("lines[{l}].from"), &bus_index, &rec.from, "bus")?,
                to: self.lookup(format!("lines[{l}].to"), &bus_index, &rec.to, "bus")?,
                reactance: rec.reactance,
                capacity: rec.capacity,
                reverse_capacity: rec.reverse_capacity.unwrap_or(rec.capacity),
            });
        }
        let grid = GridModel::new(file.buses.len(), lines, slack).map_err(|e| self.err("lines", e.to_string()))?;

        let mut participants = Vec::with_capacity(file.participants.len());
        for (j, rec) in file.participants.iter().enumerate() {
            participants.push(self.participant(j, rec, &bus_index, horizon)?);
        }

        let mut storage_index = HashMap::new();
        for (s, rec) in file.storages.iter().enumerate() {
            if storage_index.insert(rec.name.as_str(), s).is_some() {
                return Err(self.err(format!("storages[{s}].name"), format!("duplicate storage '{}'", rec.name)));
            }
        }
        let mut storages = Vec::with_capacity(file.storages.len());
        for (s, rec) in file.storages.iter().enumerate() {
            storages.push(self.storage(s, rec, &bus_index, &storage_index, horizon)?);
        }

        let case = MpedCase {
            name: file.name.clone(),
            bus_names: file.buses.iter().map(|b| b.name.clone()).collect(),
            grid,
            participants,
            storages,
            horizon,
            period_hours: file.horizon.period_hours,
            tolerance,
        };
        self.check_case(&case)?;

        let portfolio = self.portfolio(&file.rights, &case, &bus_index, &storage_index)?;
        Ok(LoadedCase { case, portfolio })
    }

    fn portfolio(
        &self,
        records: &[RightRecord],
        case: &MpedCase,
        buses: &HashMap<&str, usize>,
        storages: &HashMap<&str, usize>,
    ) -> Result<Portfolio, CaseError> {
        let rights = records
            .iter()
            .enumerate()
            .map(|(r, rec)| self.right(r, rec, case, buses, storages))
            .collect::<Result<Vec<_>, _>>()?;
        let portfolio = Portfolio::new(rights);
        portfolio.validate(case).map_err(|e| match e {
            RightsError::InvalidRight { id, reason } => self.err(format!("rights[id={id}]"), reason),
            other => self.err("rights", other.to_string()),
        })?;
        Ok(portfolio)
    }

    fn participant(
        &self,
        j: usize,
        rec: &ParticipantRecord,
        buses: &HashMap<&str, usize>,
        horizon: usize,
    ) -> Result<Participant, CaseError> {
        let field = |f: &str| format!("participants[{j}].{f}");
        let bus = self.lookup(field("bus"), buses, &rec.bus, "bus")?;
        let get = |f: &str, s: &Option<Series>, default: Option<f64>| -> Result<Vec<f64>, CaseError> {
            match (s, default) {
                (Some(series), _) => self.series(field(f), series, horizon),
                (None, Some(v)) => Ok(vec![v; horizon]),
                (None, None) => Err(self.err(field(f), format!("required for {:?} participants", rec.kind))),
            }
        };
        let cost = match rec.kind {
            ParticipantKind::FixedLoad => {
                for (f, s) in [
                    ("quadratic", &rec.quadratic),
                    ("linear", &rec.linear),
                    ("min", &rec.min),
                    ("max", &rec.max),
                ] {
                    if s.is_some() {
                        return Err(self.err(field(f), "not allowed for fixed loads; use demand"));
                    }
                }
                let demand = get("demand", &rec.demand, None)?;
                let p: Vec<f64> = demand.iter().map(|d| -d).collect();
                CostFunction {
                    quadratic: vec![0.0; horizon],
                    linear: vec![0.0; horizon],
                    min: p.clone(),
                    max: p,
                }
            }
            kind => {
                if rec.demand.is_some() {
                    return Err(self.err(field("demand"), "only allowed for fixed loads"));
                }
                let (min_default, max_default) = match kind {
                    ParticipantKind::Generator => (Some(0.0), None),
                    _ => (None, Some(0.0)),
                };
                CostFunction {
                    quadratic: get("quadratic", &rec.quadratic, Some(0.0))?,
                    linear: get("linear", &rec.linear, None)?,
                    min: get("min", &rec.min, min_default)?,
                    max: get("max", &rec.max, max_default)?,
                }
            }
        };
        Ok(Participant {
            name: rec.name.clone(),
            bus,
            kind: rec.kind,
            cost,
        })
    }

    fn storage(
        &self,
        s: usize,
        rec: &StorageRecord,
        buses: &HashMap<&str, usize>,
        storages: &HashMap<&str, usize>,
        horizon: usize,
    ) -> Result<StorageUnit, CaseError> {
        let field = |f: &str| format!("storages[{s}].{f}");
        let bus = self.lookup(field("bus"), buses, &rec.bus, "bus")?;
        let reservoir = ReservoirSpec {
            initial: rec.initial,
            lower: self.series(field("lower"), &rec.lower, horizon)?,
            upper: self.series(field("upper"), &rec.upper, horizon)?,
            inflow: match &rec.inflow {
                Some(series) => self.series(field("inflow"), series, horizon)?,
                None => vec![0.0; horizon],
            },
        };
        let mut upstream = Vec::with_capacity(rec.upstream.len());
        for (k, link) in rec.upstream.iter().enumerate() {
            upstream.push(UpstreamLink {
                storage: self.lookup(field(&format!("upstream[{k}].storage")), storages, &link.storage, "storage")?,
                lag: link.lag,
            });
        }
        let technology = match rec.technology {
            TechnologyTag::Ess => {
                for (f, present) in [("plant", rec.plant.is_some()), ("geometry", rec.geometry.is_some())] {
                    if present {
                        return Err(self.err(field(f), "not allowed for batteries"));
                    }
                }
                let power = |f: &str, v: Option<f64>| v.ok_or_else(|| self.err(field(f), "required for batteries"));
                StorageTechnology::Ess {
                    max_charge: power("max_charge", rec.max_charge)?,
                    max_discharge: power("max_discharge", rec.max_discharge)?,
                }
            }
            TechnologyTag::Hydro => {
                for (f, present) in [
                    ("max_charge", rec.max_charge.is_some()),
                    ("max_discharge", rec.max_discharge.is_some()),
                ] {
                    if present {
                        return Err(self.err(field(f), "not allowed for hydro plants; use plant.capacity"));
                    }
                }
                let plant = rec
                    .plant
                    .as_ref()
                    .ok_or_else(|| self.err(field("plant"), "required for hydro storages"))?;
                let forebay = match (plant.forebay_height, &rec.geometry) {
                    (Some(h), _) => h,
                    (None, Some(geometry)) => {
                        geometry.validate().map_err(|e| self.err(field("geometry"), e.to_string()))?;
                        forebay_height(geometry, rec.initial).map_err(|e| self.err(field("geometry"), e.to_string()))?
                    }
                    (None, None) => {
                        return Err(self.err(field("plant.forebay_height"), "required when no geometry is given"));
                    }
                };
                let physics = PlantPhysics {
                    efficiency: plant.efficiency,
                    forebay_height: forebay,
                    tailrace_intercept: plant.tailrace_intercept,
                    tailrace_slope: plant.tailrace_slope,
                    head_loss: plant.head_loss,
                    capacity: plant.capacity,
                };
                let plant = calibrate(&physics).map_err(|e| self.err(field("plant"), e.to_string()))?;
                StorageTechnology::Hydro { plant }
            }
        };
        Ok(StorageUnit {
            name: rec.name.clone(),
            bus,
            technology,
            reservoir,
            upstream,
        })
    }

    fn right(
        &self,
        r: usize,
        rec: &RightRecord,
        case: &MpedCase,
        buses: &HashMap<&str, usize>,
        storages: &HashMap<&str, usize>,
    ) -> Result<Right, CaseError> {
        let field = |f: &str| format!("rights[{r}].{f}");
        let need = |f: &str, v: &Option<String>| {
            v.clone()
                .ok_or_else(|| self.err(field(f), format!("required for {:?} rights", rec.kind)))
        };
        let kind = match rec.kind {
            RightTag::Ftr => RightKind::Ftr {
                from: self.lookup(field("from"), buses, &need("from", &rec.from)?, "bus")?,
                to: self.lookup(field("to"), buses, &need("to", &rec.to)?, "bus")?,
            },
            RightTag::Fgr => {
                let line = rec.line.ok_or_else(|| self.err(field("line"), "required for Fgr rights"))?;
                if line >= case.grid.num_lines() {
                    return Err(self.err(field("line"), format!("line {line} does not exist")));
                }
                RightKind::Fgr {
                    line,
                    direction: rec.direction.unwrap_or(Direction::Forward),
                }
            }
            RightTag::Fsr => RightKind::Fsr {
                storage: self.lookup(field("storage"), storages, &need("storage", &rec.storage)?, "storage")?,
                bus: self.lookup(field("bus"), buses, &need("bus", &rec.bus)?, "bus")?,
            },
            RightTag::Ecr => RightKind::Ecr {
                storage: self.lookup(field("storage"), storages, &need("storage", &rec.storage)?, "storage")?,
            },
        };
        Ok(Right {
            id: rec.id.clone(),
            holder: rec.holder.clone(),
            kind,
            profile: self.series(field("profile"), &rec.profile, case.horizon)?,
        })
    }

    fn check_case(&self, case: &MpedCase) -> Result<(), CaseError> {
        match case.validate() {
            Ok(_) => Ok(()),
            Err(DispatchError::InvalidCase { field, reason }) => Err(self.err(field, reason)),
            Err(DispatchError::Reservoir(ReservoirError::Cycle(cycle))) => {
                let mut names: Vec<&str> = cycle.iter().map(|&s| case.storages[s].name.as_str()).collect();
                names.push(names[0]);
                Err(self.err("storages.upstream", format!("cascade cycle {}", names.join(" -> "))))
            }
            Err(DispatchError::Reservoir(ReservoirError::Spec { node, reason } | ReservoirError::Topology { node, reason })) => {
                Err(self.err(format!("storages[{node}]"), reason))
            }
            Err(other) => Err(self.err("case", other.to_string())),
        }
    }
}

/// Serializes a case back into the file format. Hydro plants are written
/// with an explicit forebay height, so the geometry block is not needed.
pub fn emit_case(case: &MpedCase, portfolio: &Portfolio) -> Result<String, CaseError> {
    let bus = |b: usize| case.bus_names[b].clone();
    let file = CaseFile {
        schema_version: SCHEMA_VERSION,
        name: case.name.clone(),
        units: Units::default(),
        horizon: HorizonBlock {
            periods: case.horizon,
            period_hours: case.period_hours,
        },
        settings: Settings {
            tolerance: Some(case.tolerance),
            slack_bus: Some(bus(case.grid.slack())),
        },
        buses: case.bus_names.iter().map(|name| BusRecord { name: name.clone() }).collect(),
        lines: case
            .grid
            .lines()
            .iter()
            .map(|l| LineRecord {
                from: bus(l.from),
                to: bus(l.to),
                reactance: l.reactance,
                capacity: l.capacity,
                reverse_capacity: (l.reverse_capacity != l.capacity).then_some(l.reverse_capacity),
            })
            .collect(),
        participants: case
            .participants
            .iter()
            .map(|p| {
                let c = &p.cost;
                if p.kind == ParticipantKind::FixedLoad {
                    ParticipantRecord {
                        name: p.name.clone(),
                        bus: bus(p.bus),
                        kind: p.kind,
                        quadratic: None,
                        linear: None,
                        min: None,
                        max: None,
                        demand: Some(Series::compress(&c.min.iter().map(|v| -v).collect::<Vec<_>>())),
                    }
                } else {
                    ParticipantRecord {
                        name: p.name.clone(),
                        bus: bus(p.bus),
                        kind: p.kind,
                        quadratic: Some(Series::compress(&c.quadratic)),
                        linear: Some(Series::compress(&c.linear)),
                        min: Some(Series::compress(&c.min)),
                        max: Some(Series::compress(&c.max)),
                        demand: None,
                    }
                }
            })
            .collect(),
        storages: case
            .storages
            .iter()
            .map(|s| {
                let (technology, max_charge, max_discharge, plant) = match &s.technology {
                    StorageTechnology::Ess { max_charge, max_discharge } => {
                        (TechnologyTag::Ess, Some(*max_charge), Some(*max_discharge), None)
                    }
                    StorageTechnology::Hydro { plant } => {
                        let p = &plant.physics;
                        let record = PlantRecord {
                            efficiency: p.efficiency,
                            forebay_height: Some(p.forebay_height),
                            tailrace_intercept: p.tailrace_intercept,
                            tailrace_slope: p.tailrace_slope,
                            head_loss: p.head_loss,
                            capacity: p.capacity,
                        };
                        (TechnologyTag::Hydro, None, None, Some(record))
                    }
                };
                StorageRecord {
                    name: s.name.clone(),
                    bus: bus(s.bus),
                    technology,
                    max_charge,
                    max_discharge,
                    initial: s.reservoir.initial,
                    lower: Series::compress(&s.reservoir.lower),
                    upper: Series::compress(&s.reservoir.upper),
                    inflow: Some(Series::compress(&s.reservoir.inflow)),
                    upstream: s
                        .upstream
                        .iter()
                        .map(|l| UpstreamRecord {
                            storage: case.storages[l.storage].name.clone(),
                            lag: l.lag,
                        })
                        .collect(),
                    plant,
                    geometry: None,
                }
            })
            .collect(),
        rights: portfolio
            .rights
            .iter()
            .map(|r| {
                let mut rec = RightRecord {
                    id: r.id.clone(),
                    holder: r.holder.clone(),
                    kind: RightTag::Ftr,
                    from: None,
                    to: None,
                    line: None,
                    direction: None,
                    storage: None,
                    bus: None,
                    profile: Series::compress(&r.profile),
                };
                match r.kind {
                    RightKind::Ftr { from, to } => {
                        rec.from = Some(bus(from));
                        rec.to = Some(bus(to));
                    }
                    RightKind::Fgr { line, direction } => {
                        rec.kind = RightTag::Fgr;
                        rec.line = Some(line);
                        rec.direction = Some(direction);
                    }
                    RightKind::Fsr { storage, bus: b } => {
                        rec.kind = RightTag::Fsr;
                        rec.storage = Some(case.storages[storage].name.clone());
                        rec.bus = Some(bus(b));
                    }
                    RightKind::Ecr { storage } => {
                        rec.kind = RightTag::Ecr;
                        rec.storage = Some(case.storages[storage].name.clone());
                    }
                }
                rec
            })
            .collect(),
    };
    toml::to_string(&file).map_err(|e| CaseError::Parse {
        path: case.name.clone(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_bundled_case_loads() {
        for name in bundled_names() {
            let loaded = load_bundled(name).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(loaded.case.name, name);
            assert!(loaded.case.horizon <= 2 && loaded.case.grid.num_buses() <= 3);
        }
    }

    #[test]
    fn two_bus_case_dimensions() {
        let loaded = load_bundled("two_bus_congested").unwrap();
        assert_eq!(loaded.case.grid.num_buses(), 2);
        assert_eq!(loaded.case.grid.num_lines(), 1);
        assert_eq!(loaded.case.horizon, 2);
    }

    #[test]
    fn emitted_cases_reload_identically() {
        for name in bundled_names() {
            let loaded = load_bundled(name).unwrap();
            let text = emit_case(&loaded.case, &loaded.portfolio).unwrap();
            let again = parse_case(&text, "<emitted>").unwrap();
            assert_eq!(again, loaded, "{name}");
        }
    }

    #[test]
    fn errors_name_the_field() {
        let text = bundled_source("two_bus_congested").unwrap().replace("\"MW\"", "\"kW\"");
        match parse_case(&text, "x.toml") {
            Err(CaseError::Invalid { path, field, .. }) => {
                assert_eq!(path, "x.toml");
                assert_eq!(field, "units.power");
            }
            other => panic!("{other:?}"),
        }
        let text = bundled_source("two_bus_congested").unwrap().replace("bus = \"B\"", "bus = \"Z\"");
        assert!(matches!(parse_case(&text, "x.toml"), Err(CaseError::Invalid { .. })));
        let text = bundled_source("two_bus_congested")
            .unwrap()
            .replace("schema_version = 1", "schema_version = 9");
        assert!(matches!(parse_case(&text, "x.toml"), Err(CaseError::Version { found: 9, .. })));
    }

    #[test]
    fn calibration_failure_names_inequality() {
        let text = bundled_source("peak_offpeak_hydro")
            .unwrap()
            .replace("tailrace_intercept = 20.0", "tailrace_intercept = 30.0");
        match parse_case(&text, "h.toml") {
            Err(CaseError::Invalid { field, reason, .. }) => {
                assert_eq!(field, "storages[0].plant");
                assert!(reason.contains("forebay height > tailrace intercept"), "{reason}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cascade_cycle_is_reported() {
        let text = bundled_source("hydro_cascade").unwrap().replace(
            "name = \"upper\"",
            "name = \"upper\"\nupstream = [{ storage = \"lower\", lag = 0 }]",
        );
        match parse_case(&text, "c.toml") {
            Err(CaseError::Invalid { reason, .. }) => assert!(reason.contains("cycle upper -> lower -> upper"), "{reason}"),
            other => panic!("{other:?}"),
        }
    }
}
