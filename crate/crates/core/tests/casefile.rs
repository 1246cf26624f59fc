use storage_rights_testkit as common;

use common::cases::{random_case, random_portfolio, CaseShape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use storage_rights::casefile::{bundled_names, emit_case, load_bundled, load_case, parse_case, CaseError};
use storage_rights::dispatch::solve_mped;
use storage_rights::report::{csv_body, dispatch_tables};

#[test]
fn bundled_cases_survive_emit_and_reload() {
    for name in bundled_names() {
        let loaded = load_bundled(name).unwrap();
        let text = emit_case(&loaded.case, &loaded.portfolio).unwrap();
        let again = parse_case(&text, name).unwrap();
        assert_eq!(again, loaded, "{name}");
        assert_eq!(emit_case(&again.case, &again.portfolio).unwrap(), text);
    }
}

#[test]
fn random_cases_survive_emit_and_reload() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    for k in 0..60 {
        let case = random_case(&mut rng, CaseShape::default());
        let portfolio = random_portfolio(&mut rng, &case, 3);
        let portfolio =
            storage_rights::rights::Portfolio::new(portfolio.rights.into_iter().filter(|r| r.validate(&case).is_ok()).collect());
        let text = emit_case(&case, &portfolio).unwrap();
        let loaded = parse_case(&text, "random").unwrap_or_else(|e| panic!("case {k}: {e}\n{text}"));
        assert_eq!(loaded.case, case, "case {k}");
        assert_eq!(loaded.portfolio, portfolio, "case {k}");
    }
}

#[test]
fn files_load_from_disk_and_errors_name_the_path() {
    let dir = std::env::temp_dir().join(format!("storage-rights-casefile-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let loaded = load_bundled("ess_arbitrage").unwrap();
    let path = dir.join("ess.toml");
    std::fs::write(&path, emit_case(&loaded.case, &loaded.portfolio).unwrap()).unwrap();
    assert_eq!(load_case(&path).unwrap(), loaded);

    let missing = dir.join("missing.toml");
    match load_case(&missing) {
        Err(CaseError::Io { path, .. }) => assert!(path.contains("missing.toml")),
        other => panic!("{other:?}"),
    }

    let text = emit_case(&loaded.case, &loaded.portfolio)
        .unwrap()
        .replace("power = \"MW\"", "power = \"kW\"");
    let bad = dir.join("units.toml");
    std::fs::write(&bad, text).unwrap();
    match load_case(&bad) {
        Err(CaseError::Invalid { path, field, .. }) => {
            assert!(path.contains("units.toml"));
            assert_eq!(field, "units.power");
        }
        other => panic!("{other:?}"),
    }
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn unsupported_schema_version_is_rejected() {
    let text = load_bundled_text("two_bus_congested").replace("schema_version = 1", "schema_version = 7");
    assert!(matches!(parse_case(&text, "x"), Err(CaseError::Version { found: 7, .. })));
}

#[test]
fn unknown_references_are_reported_by_field() {
    let text = load_bundled_text("two_bus_congested").replacen("bus = \"B\"", "bus = \"Z\"", 1);
    match parse_case(&text, "x") {
        Err(CaseError::Invalid { field, reason, .. }) => {
            assert!(field.ends_with(".bus"), "{field}");
            assert!(reason.contains('Z'), "{reason}");
        }
        other => panic!("{other:?}"),
    }
}

fn load_bundled_text(name: &str) -> String {
    storage_rights::casefile::bundled_source(name).unwrap().to_string()
}

#[test]
fn repeated_dispatch_gives_identical_csv_bodies() {
    for name in bundled_names() {
        let case = load_bundled(name).unwrap().case;
        let first = dispatch_tables(&case, &solve_mped(&case).unwrap());
        let second = dispatch_tables(&case, &solve_mped(&case).unwrap());
        for (a, b) in first.iter().zip(&second) {
            let (ta, tb) = (a.to_csv(100).unwrap(), b.to_csv(200).unwrap());
            assert_eq!(csv_body(&ta), csv_body(&tb), "{name}/{}", a.name);
            assert!(ta.starts_with("# generated_at_unix=100\n"));
        }
    }
}

#[test]
fn standalone_portfolio_files_resolve_against_the_case() {
    let loaded = load_bundled("two_bus_congested").unwrap();
    let text =
        "schema_version = 1\n\n[[rights]]\nid = \"x\"\nholder = \"h\"\nkind = \"ftr\"\nfrom = \"A\"\nto = \"B\"\nprofile = [5.0, 2.5]\n";
    let portfolio = storage_rights::casefile::parse_portfolio(text, "p.toml", &loaded.case).unwrap();
    assert_eq!(portfolio.rights.len(), 1);
    assert_eq!(portfolio.rights[0].profile, vec![5.0, 2.5]);
    let bad = text.replace("to = \"B\"", "to = \"Q\"");
    match storage_rights::casefile::parse_portfolio(&bad, "p.toml", &loaded.case) {
        Err(CaseError::Invalid { path, field, .. }) => {
            assert_eq!(path, "p.toml");
            assert!(field.ends_with(".to"), "{field}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn plant_calibration_and_cascade_cycles_surface_through_the_loader() {
    let text = load_bundled_text("hydro_cascade");
    let low_forebay = text.replacen("forebay_height = 22.0", "forebay_height = 19.0", 1);
    let err = parse_case(&low_forebay, "low.toml").unwrap_err().to_string();
    assert!(err.contains("forebay height > tailrace intercept"), "{err}");

    let cyclic = text.replacen("inflow = 1.0\n", "inflow = 1.0\nupstream = [{ storage = \"lower\", lag = 1 }]\n", 1);
    let err = parse_case(&cyclic, "cycle.toml").unwrap_err().to_string();
    assert!(err.contains("cycle"), "{err}");
    assert!(err.contains("upper") && err.contains("lower"), "{err}");
}
