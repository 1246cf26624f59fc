use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use storage_rights::casefile::{load_case_or_bundled, load_portfolio, CaseError, LoadedCase};
use storage_rights::dispatch::{solve_mped, DispatchError};
use storage_rights::report::{self, ReportError};
use storage_rights::rights::{
    revenue_adequacy_check, simultaneous_feasibility_test, value_fsr_flat_bid_reallocation, Portfolio, RightsError,
};

/// Dispatch, price and settle transmission and storage rights on case files.
#[derive(Debug, Parser)]
#[command(name = "storage-rights", version)]
struct Cli {
    /// Directory receiving artifacts, one subdirectory per case.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the solver tolerance declared by the case.
    #[arg(long, global = true)]
    tolerance: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the dispatch and write schedules, prices and a summary.
    Dispatch { case: String },
    /// Settle the portfolio against a previously written dispatch.
    Settle {
        case: String,
        /// Portfolio file; defaults to the rights declared in the case.
        #[arg(long)]
        portfolio: Option<PathBuf>,
    },
    /// Run the simultaneous feasibility test on the portfolio.
    Sft {
        case: String,
        #[arg(long)]
        portfolio: Option<PathBuf>,
    },
    /// Value moving a storage unit's daily energy away from a flat schedule.
    ValueFsr {
        case: String,
        /// Storage unit name.
        #[arg(long)]
        storage: String,
        /// Daily energy (MWh).
        #[arg(long)]
        energy: f64,
    },
    /// Dispatch, test and settle several cases concurrently.
    Report {
        #[arg(required = true)]
        cases: Vec<String>,
    },
}

/// A command was run before the artifact it depends on exists.
#[derive(Debug)]
struct MissingArtifact {
    path: PathBuf,
    producer: String,
}

impl std::fmt::Display for MissingArtifact {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} not found; run `{}` first", self.path.display(), self.producer)
    }
}

impl std::error::Error for MissingArtifact {}

fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if cause.is::<MissingArtifact>() {
            return "ordering";
        }
        if cause.is::<CaseError>() {
            return "case";
        }
        if cause.is::<DispatchError>() {
            return "dispatch";
        }
        if cause.is::<RightsError>() {
            return "rights";
        }
        if cause.is::<ReportError>() {
            return "report";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "other"
}

fn timestamp() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

struct Runner {
    out: PathBuf,
    tolerance: Option<f64>,
}

impl Runner {
    fn load(&self, reference: &str) -> Result<LoadedCase> {
        let mut loaded = load_case_or_bundled(reference)?;
        if let Some(tol) = self.tolerance {
            if !(tol > 0.0 && tol.is_finite()) {
                bail!("--tolerance must be a positive number, got {tol}");
            }
            loaded.case.tolerance = tol;
        }
        Ok(loaded)
    }

    fn case_dir(&self, loaded: &LoadedCase) -> Result<PathBuf> {
        let dir = self.out.join(&loaded.case.name);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
    }

    fn portfolio(loaded: &LoadedCase, file: Option<&Path>) -> Result<Portfolio> {
        match file {
            Some(path) => Ok(load_portfolio(path, &loaded.case)?),
            None => Ok(loaded.portfolio.clone()),
        }
    }

    fn dispatch(&self, reference: &str) -> Result<String> {
        let loaded = self.load(reference)?;
        let dir = self.case_dir(&loaded)?;
        let sol = solve_mped(&loaded.case)?;
        let stamp = timestamp();
        for table in report::dispatch_tables(&loaded.case, &sol) {
            Self::write(&dir, &table.file_name(), &table.to_csv(stamp)?)?;
        }
        Self::write(&dir, "solution.json", &report::solution_json(&sol)?)?;
        let summary = report::dispatch_summary(&loaded.case, &sol)?;
        Self::write(&dir, "summary.txt", &summary)?;
        Ok(summary)
    }

    fn settle(&self, reference: &str, portfolio: Option<&Path>) -> Result<String> {
        let loaded = self.load(reference)?;
        let dir = self.out.join(&loaded.case.name);
        let artifact = dir.join("solution.json");
        if !artifact.is_file() {
            return Err(MissingArtifact {
                path: artifact,
                producer: format!("storage-rights dispatch {reference}"),
            }
            .into());
        }
        let text = fs::read_to_string(&artifact).with_context(|| format!("reading {}", artifact.display()))?;
        let sol = report::read_solution(&text, &loaded.case)?;
        let portfolio = Self::portfolio(&loaded, portfolio)?;
        let settlement = match revenue_adequacy_check(&loaded.case, &sol, &portfolio) {
            Ok(settlement) => settlement,
            Err(RightsError::AdequacyViolated { report: settlement, .. }) => {
                let summary = report::settlement_summary(&settlement);
                Self::write(&dir, "settlement.txt", &summary)?;
                return Err(anyhow!(RightsError::AdequacyViolated {
                    rents: settlement.total_rent,
                    surplus: settlement.merchandising_surplus,
                    report: settlement,
                }));
            }
            Err(e) => return Err(e.into()),
        };
        Self::write(&dir, "settlement.csv", &report::settlement_csv(&settlement, timestamp())?)?;
        let summary = report::settlement_summary(&settlement);
        Self::write(&dir, "settlement.txt", &summary)?;
        Ok(summary)
    }

    fn sft(&self, reference: &str, portfolio: Option<&Path>) -> Result<String> {
        let loaded = self.load(reference)?;
        let dir = self.case_dir(&loaded)?;
        let portfolio = Self::portfolio(&loaded, portfolio)?;
        let outcome = simultaneous_feasibility_test(&loaded.case, &portfolio)?;
        Self::write(&dir, "sft.json", &serde_json::to_string_pretty(&outcome)?)?;
        Ok(report::sft_summary(&outcome))
    }

    fn value_fsr(&self, reference: &str, storage: &str, energy: f64) -> Result<String> {
        let loaded = self.load(reference)?;
        let dir = self.case_dir(&loaded)?;
        let index = loaded
            .case
            .storages
            .iter()
            .position(|s| s.name == storage)
            .ok_or_else(|| anyhow!("case {} has no storage named '{storage}'", loaded.case.name))?;
        let valuation = value_fsr_flat_bid_reallocation(&loaded.case, index, energy)?;
        Self::write(&dir, "valuation.json", &serde_json::to_string_pretty(&valuation)?)?;
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(" ");
        Ok(format!(
            "storage: {storage}\ndaily energy: {energy} MWh\nflat schedule (MW): {}\nreallocated schedule (MW): {}\nflat cost: {:.6} $\nreallocated cost: {:.6} $\nvaluation: {:.6} $\n",
            fmt(&valuation.flat_schedule),
            fmt(&valuation.reallocated_schedule),
            valuation.flat_objective,
            valuation.reallocated_objective,
            valuation.valuation
        ))
    }

    fn scenario(&self, reference: &str) -> Result<String> {
        let dispatch = self.dispatch(reference)?;
        let sft = self.sft(reference, None)?;
        let settlement = self.settle(reference, None)?;
        Ok(format!("{dispatch}{sft}{settlement}"))
    }

    fn report(&self, references: &[String]) -> Result<String> {
        let results: Vec<Result<String>> = std::thread::scope(|scope| {
            let handles: Vec<_> = references.iter().map(|r| scope.spawn(move || self.scenario(r))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(anyhow!("scenario worker panicked"))))
                .collect()
        });
        let mut combined = String::new();
        let mut failures = Vec::new();
        for (reference, result) in references.iter().zip(results) {
            combined.push_str(&format!("== {reference} ==\n"));
            match result {
                Ok(text) => combined.push_str(&text),
                Err(e) => {
                    combined.push_str(&format!("error: {e:#}\n"));
                    failures.push(reference.clone());
                }
            }
            combined.push('\n');
        }
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Self::write(&self.out, "report.txt", &combined)?;
        if !failures.is_empty() {
            print!("{combined}");
            bail!(
                "{} of {} scenarios failed: {}",
                failures.len(),
                references.len(),
                failures.join(", ")
            );
        }
        Ok(combined)
    }
}

fn run(cli: Cli) -> Result<String> {
    let runner = Runner {
        out: cli.out,
        tolerance: cli.tolerance,
    };
    match cli.command {
        Command::Dispatch { case } => runner.dispatch(&case),
        Command::Settle { case, portfolio } => runner.settle(&case, portfolio.as_deref()),
        Command::Sft { case, portfolio } => runner.sft(&case, portfolio.as_deref()),
        Command::ValueFsr { case, storage, energy } => runner.value_fsr(&case, &storage, energy),
        Command::Report { cases } => runner.report(&cases),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = match cli.command {
        Command::Dispatch { .. } => "dispatch",
        Command::Settle { .. } => "settle",
        Command::Sft { .. } => "sft",
        Command::ValueFsr { .. } => "value-fsr",
        Command::Report { .. } => "report",
    };
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            let record = serde_json::json!({
                "error": error_kind(&err),
                "command": command,
                "message": format!("{err:#}"),
            });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
