//! Run artifacts: long-format CSV tables, JSON solution snapshots and
//! plain-text summaries.
//!
//! Every CSV file starts with a `# generated_at_unix=<seconds>` comment line
//! followed by the column header. Two runs on identical inputs differ only in
//! that first line; [`csv_body`] strips it for comparison.

use std::fmt::Write as _;

use thiserror::Error;

use crate::dispatch::{merchandising_surplus, DispatchError, DispatchSolution, MpedCase};
use crate::rights::{SettlementReport, SftOutcome};

pub const TIMESTAMP_PREFIX: &str = "# generated_at_unix=";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("csv output failed: {0}")]
    Csv(#[from] csv::Error),
    #[error("solution snapshot: {0}")]
    Json(#[from] serde_json::Error),
    #[error("solution snapshot does not match case {case}: {reason}")]
    Mismatch { case: String, reason: String },
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
}

/// One matrix output in `(entity, period, value)` form with 1-based periods.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: &'static str,
    pub rows: Vec<(String, usize, f64)>,
}

impl Table {
    fn from_matrix(name: &'static str, labels: &[String], matrix: &[Vec<f64>]) -> Self {
        let rows = labels
            .iter()
            .zip(matrix)
            .flat_map(|(label, series)| series.iter().enumerate().map(move |(t, v)| (label.clone(), t + 1, *v)))
            .collect();
        Self { name, rows }
    }

    pub fn file_name(&self) -> String {
        format!("{}.csv", self.name)
    }

    pub fn to_csv(&self, generated_at: u64) -> Result<String, ReportError> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(["entity", "period", "value"])?;
        for (entity, period, value) in &self.rows {
            writer.write_record([entity.as_str(), &period.to_string(), &value.to_string()])?;
        }
        Ok(with_timestamp(generated_at, writer)?)
    }
}

fn with_timestamp(generated_at: u64, writer: csv::Writer<Vec<u8>>) -> Result<String, csv::Error> {
    let bytes = writer.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    let body = String::from_utf8(bytes).expect("csv writer emits utf-8 for utf-8 input");
    Ok(format!("{TIMESTAMP_PREFIX}{generated_at}\n{body}"))
}

/// Drops the timestamp comment so bodies of repeated runs can be compared.
pub fn csv_body(text: &str) -> &str {
    match text.strip_prefix(TIMESTAMP_PREFIX) {
        Some(rest) => rest.split_once('\n').map_or("", |(_, body)| body),
        None => text,
    }
}

fn directed_line_labels(case: &MpedCase) -> Vec<String> {
    let lines = case.grid.lines();
    let name = |b: usize| case.bus_names.get(b).cloned().unwrap_or_else(|| b.to_string());
    let forward = lines
        .iter()
        .enumerate()
        .map(|(l, line)| format!("line{l}:{}->{}", name(line.from), name(line.to)));
    let reverse = lines
        .iter()
        .enumerate()
        .map(|(l, line)| format!("line{l}:{}->{}", name(line.to), name(line.from)));
    forward.chain(reverse).collect()
}

/// Primal schedules and prices of a dispatch as separate tables.
pub fn dispatch_tables(case: &MpedCase, sol: &DispatchSolution) -> Vec<Table> {
    let participants: Vec<String> = case.participants.iter().map(|p| p.name.clone()).collect();
    let storages: Vec<String> = case.storages.iter().map(|s| s.name.clone()).collect();
    let lines = directed_line_labels(case);
    vec![
        Table::from_matrix("participant_output", &participants, &sol.participant_output),
        Table::from_matrix("storage_power", &storages, &sol.storage_power),
        Table::from_matrix("discharge", &storages, &sol.discharge),
        Table::from_matrix("storage_level", &storages, &sol.storage_level),
        Table::from_matrix("flows", &lines, &sol.flows),
        Table::from_matrix("lmp", &case.bus_names, &sol.lmp),
        Table::from_matrix("flow_prices", &lines, &sol.flow_prices),
        Table::from_matrix("storage_upper_prices", &storages, &sol.storage_upper_prices),
        Table::from_matrix("storage_lower_prices", &storages, &sol.storage_lower_prices),
    ]
}

pub fn settlement_csv(report: &SettlementReport, generated_at: u64) -> Result<String, ReportError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["right", "holder", "kind", "rent"])?;
    for r in &report.rents {
        writer.write_record([r.id.as_str(), &r.holder, &r.kind, &r.rent.to_string()])?;
    }
    Ok(with_timestamp(generated_at, writer)?)
}

pub fn solution_json(sol: &DispatchSolution) -> Result<String, ReportError> {
    Ok(serde_json::to_string_pretty(sol)?)
}

/// Parses a snapshot and checks that its dimensions fit `case`.
pub fn read_solution(text: &str, case: &MpedCase) -> Result<DispatchSolution, ReportError> {
    let sol: DispatchSolution = serde_json::from_str(text)?;
    let mismatch = |reason: String| ReportError::Mismatch {
        case: case.name.clone(),
        reason,
    };
    if sol.case_name != case.name {
        return Err(mismatch(format!("snapshot was produced for '{}'", sol.case_name)));
    }
    let shapes = [
        ("horizon", sol.horizon, case.horizon),
        ("participants", sol.participant_output.len(), case.num_participants()),
        ("storages", sol.storage_power.len(), case.num_storages()),
        ("buses", sol.lmp.len(), case.grid.num_buses()),
        ("directed lines", sol.flow_prices.len(), case.grid.num_directed()),
    ];
    for (what, found, expected) in shapes {
        if found != expected {
            return Err(mismatch(format!("{what}: snapshot has {found}, case has {expected}")));
        }
    }
    Ok(sol)
}

pub fn dispatch_summary(case: &MpedCase, sol: &DispatchSolution) -> Result<String, ReportError> {
    let ms = merchandising_surplus(sol)?;
    let mut out = String::new();
    let _ = writeln!(out, "case: {}", case.name);
    let _ = writeln!(out, "periods: {} x {} h", case.horizon, case.period_hours);
    let _ = writeln!(out, "status: {:?} after {} iterations", sol.status, sol.iterations);
    let _ = writeln!(out, "objective: {:.6} $", sol.objective);
    let _ = writeln!(out, "merchandising surplus: {:.6} $", ms.surplus);
    let _ = writeln!(out, "  congestion term: {:.6} $", ms.flow_term);
    let _ = writeln!(out, "  storage term: {:.6} $", ms.storage_term);
    let _ = writeln!(out, "locational marginal prices ($/MWh):");
    for (name, prices) in case.bus_names.iter().zip(&sol.lmp) {
        let cells: Vec<String> = prices.iter().map(|p| format!("{p:.6}")).collect();
        let _ = writeln!(out, "  {name}: {}", cells.join(" "));
    }
    Ok(out)
}

pub fn settlement_summary(report: &SettlementReport) -> String {
    let mut out = String::new();
    for r in &report.rents {
        let _ = writeln!(out, "{} ({}, {}): {:.6} $", r.id, r.kind, r.holder, r.rent);
    }
    let t = &report.totals;
    let _ = writeln!(
        out,
        "totals: ftr {:.6}  fgr {:.6}  fsr {:.6}  ecr {:.6}",
        t.ftr, t.fgr, t.fsr, t.ecr
    );
    let _ = writeln!(out, "total rent: {:.6} $", report.total_rent);
    let _ = writeln!(out, "merchandising surplus: {:.6} $", report.merchandising_surplus);
    let _ = writeln!(out, "storage settlement: {:.6} $", report.storage_settlement);
    let _ = writeln!(out, "adequacy slack: {:.6} $", report.slack);
    let _ = writeln!(out, "revenue adequate: {}", if report.adequate { "yes" } else { "NO" });
    out
}

pub fn sft_summary(outcome: &SftOutcome) -> String {
    let mut out = String::new();
    if outcome.feasible {
        let _ = writeln!(out, "verdict: feasible");
    } else {
        let _ = writeln!(out, "verdict: infeasible (max violation {:e})", outcome.max_violation);
        for row in &outcome.violated {
            let _ = writeln!(out, "  {}: {:e}", row.description, row.violation);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::casefile::load_bundled;
    use crate::dispatch::solve_mped;

    #[test]
    fn csv_body_skips_only_the_timestamp() {
        let table = Table {
            name: "lmp",
            rows: vec![("A".into(), 1, 10.0), ("B, east".into(), 2, 12.5)],
        };
        let a = table.to_csv(1).unwrap();
        let b = table.to_csv(2).unwrap();
        assert_ne!(a, b);
        assert_eq!(csv_body(&a), csv_body(&b));
        assert_eq!(csv_body(&a), "entity,period,value\nA,1,10\n\"B, east\",2,12.5\n");
    }

    #[test]
    fn snapshot_round_trips_and_checks_case() {
        let case = load_bundled("two_bus_congested").unwrap().case;
        let sol = solve_mped(&case).unwrap();
        let text = solution_json(&sol).unwrap();
        assert_eq!(read_solution(&text, &case).unwrap(), sol);
        let other = load_bundled("three_bus_triangle").unwrap().case;
        assert!(matches!(read_solution(&text, &other), Err(ReportError::Mismatch { .. })));
    }

    #[test]
    fn summary_reports_surplus() {
        let case = load_bundled("two_bus_congested").unwrap().case;
        let sol = solve_mped(&case).unwrap();
        let text = dispatch_summary(&case, &sol).unwrap();
        assert!(text.contains("merchandising surplus: 60.000000 $"), "{text}");
    }
}
