use std::path::Path;
use std::process::{Command, Output};

use storage_rights::report::csv_body;

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_storage-rights"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn error_record(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().last().unwrap_or_else(|| panic!("no stderr"));
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {text}"))
}

#[test]
fn dispatch_reports_surplus_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["dispatch", "two_bus_congested"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("merchandising surplus: 60.000000 $"), "{text}");
    let case_dir = dir.path().join("two_bus_congested");
    for file in ["solution.json", "summary.txt", "lmp.csv", "flows.csv", "participant_output.csv"] {
        assert!(case_dir.join(file).is_file(), "{file}");
    }
    let lmp = std::fs::read_to_string(case_dir.join("lmp.csv")).unwrap();
    assert!(lmp.starts_with("# generated_at_unix="));
    assert!(csv_body(&lmp).starts_with("entity,period,value\n"));
}

#[test]
fn settle_after_dispatch_splits_surplus() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(dir.path(), &["dispatch", "two_bus_congested"]).status.success());
    let o = run(dir.path(), &["settle", "two_bus_congested"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("ftr-ab (ftr, retailer): 20.000000 $"), "{text}");
    assert!(text.contains("revenue adequate: yes"), "{text}");
    let csv = std::fs::read_to_string(dir.path().join("two_bus_congested/settlement.csv")).unwrap();
    assert!(csv_body(&csv).starts_with("right,holder,kind,rent\n"));
}

#[test]
fn settle_without_dispatch_is_an_ordering_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["settle", "two_bus_congested"]);
    assert!(!o.status.success());
    let record = error_record(&o);
    assert_eq!(record["error"], "ordering");
    assert_eq!(record["command"], "settle");
    assert!(record["message"].as_str().unwrap().contains("solution.json"));
}

#[test]
fn empty_portfolio_is_feasible() {
    let dir = tempfile::tempdir().unwrap();
    let portfolio = dir.path().join("empty.toml");
    std::fs::write(&portfolio, "schema_version = 1\nrights = []\n").unwrap();
    let o = run(
        dir.path(),
        &["sft", "three_bus_triangle", "--portfolio", portfolio.to_str().unwrap()],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("verdict: feasible"));
    assert!(dir.path().join("three_bus_triangle/sft.json").is_file());
}

#[test]
fn oversized_portfolio_names_the_binding_row() {
    let dir = tempfile::tempdir().unwrap();
    let portfolio = dir.path().join("big.toml");
    std::fs::write(
        &portfolio,
        "schema_version = 1\n\n[[rights]]\nid = \"big\"\nholder = \"h\"\nkind = \"ftr\"\nfrom = \"A\"\nto = \"B\"\nprofile = 31.0\n",
    )
    .unwrap();
    let o = run(
        dir.path(),
        &["sft", "two_bus_congested", "--portfolio", portfolio.to_str().unwrap()],
    );
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("verdict: infeasible"), "{text}");
    assert!(text.contains("flow limit of line 0 (A -> B) at period 1"), "{text}");
}

#[test]
fn csv_bodies_are_identical_across_runs() {
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    for dir in [&first, &second] {
        assert!(run(dir.path(), &["dispatch", "ess_arbitrage"]).status.success());
    }
    let case = Path::new("ess_arbitrage");
    let mut compared = 0;
    for entry in std::fs::read_dir(first.path().join(case)).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "csv") {
            let a = std::fs::read_to_string(&path).unwrap();
            let b = std::fs::read_to_string(second.path().join(case).join(path.file_name().unwrap())).unwrap();
            assert_eq!(csv_body(&a), csv_body(&b), "{}", path.display());
            compared += 1;
        }
    }
    assert_eq!(compared, 9);
}

#[test]
fn report_runs_scenarios_concurrently_in_input_order() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["report", "two_bus_congested", "ess_arbitrage", "three_bus_triangle"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let a = text.find("== two_bus_congested ==").unwrap();
    let b = text.find("== ess_arbitrage ==").unwrap();
    let c = text.find("== three_bus_triangle ==").unwrap();
    assert!(a < b && b < c);
    assert_eq!(std::fs::read_to_string(dir.path().join("report.txt")).unwrap(), text);
}

#[test]
fn value_fsr_prints_valuation() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        dir.path(),
        &["value-fsr", "peak_offpeak_hydro", "--storage", "dam", "--energy", "100"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("valuation: 500.0"), "{}", stdout(&o));
}

#[test]
fn unknown_case_yields_case_error_record() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["dispatch", "no_such_case"]);
    assert!(!o.status.success());
    assert_eq!(error_record(&o)["error"], "case");
}
