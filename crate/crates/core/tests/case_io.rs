use drcc::case_io::{load_case, parse_matpower, to_matpower, to_network, BusKind, CaseError, NetworkOptions};
use proptest::prelude::*;

#[test]
fn bundled_cases_have_their_published_sizes() {
    let c14 = to_network(&load_case("bundled:case14").unwrap(), &NetworkOptions::default()).unwrap();
    assert_eq!((c14.n_bus(), c14.n_gen(), c14.n_branch()), (14, 5, 20));
    assert_eq!(c14.buses[c14.slack].id, 1);
    assert_eq!(c14.buses[c14.slack].kind, BusKind::Slack);
    let total_load: f64 = c14.buses.iter().map(|b| b.pd).sum::<f64>() * c14.base_mva;
    assert!((total_load - 259.0).abs() < 1e-9);

    let raw300 = load_case("bundled:case300").unwrap();
    let opts = NetworkOptions { allow_negative_reactance: true, ..NetworkOptions::default() };
    let c300 = to_network(&raw300, &opts).unwrap();
    assert_eq!((c300.n_bus(), c300.n_gen(), c300.n_branch()), (300, 69, 411));
}

#[test]
fn negative_reactance_needs_opting_in() {
    let raw = load_case("bundled:case300").unwrap();
    let err = to_network(&raw, &NetworkOptions::default()).unwrap_err();
    assert!(matches!(err, CaseError::NonpositiveReactance { .. }), "{err}");
}

#[test]
fn missing_limits_become_finite_only_when_asked() {
    let raw = load_case("bundled:case14").unwrap();
    let plain = to_network(&raw, &NetworkOptions::default()).unwrap();
    assert!(plain.branches.iter().all(|b| b.limit.is_infinite()));
    let derived = to_network(&raw, &NetworkOptions { derive_missing_limits: true, ..NetworkOptions::default() }).unwrap();
    assert!(derived.branches.iter().all(|b| b.limit.is_finite() && b.limit > 0.0));
    let fixed = to_network(&raw, &NetworkOptions { default_line_limit: 1.5, ..NetworkOptions::default() }).unwrap();
    assert!(fixed.branches.iter().all(|b| b.limit == 1.5));
}

#[test]
fn unknown_bundled_case_and_missing_file_are_reported() {
    assert!(matches!(load_case("bundled:case9999"), Err(CaseError::Io { .. })));
    assert!(matches!(load_case("/nonexistent/case.m"), Err(CaseError::Io { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn writer_and_parser_round_trip(scale in prop::collection::vec(0.1f64..10.0, 3), base in 1.0f64..1000.0) {
        let mut raw = load_case("bundled:case14").unwrap();
        raw.base_mva = base;
        for r in &mut raw.bus {
            r[2] *= scale[0];
        }
        for r in &mut raw.branch {
            r[3] *= scale[1];
        }
        for r in &mut raw.gen {
            r[8] *= scale[2];
        }
        let back = parse_matpower(&to_matpower(&raw, "perturbed")).unwrap();
        prop_assert_eq!(back, raw);
    }
}
