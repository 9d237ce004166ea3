use std::path::{Path, PathBuf};

use lmmsdp::io::{
    fmt_f64, matrix_to_csv, parse_market_data, parse_target, read_market_file, read_matrix_csv, read_scenarios, read_vector_csv,
    target_indices, write_market_json, CapletVol, CurveSpec, MarketDataFile,
};
use lmmsdp::AppError;
use lmmsdp_core::linalg::SymMatrix;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn sydney_fixture_has_28_instruments_in_fractions() {
    let m = parse_market_data(&fixture("sydney.json")).unwrap();
    assert_eq!(m.market.quotes.len(), 28);
    assert_eq!(m.labels[0], "caplet 1Y");
    assert_eq!(m.labels[20], "2Yx5Y");
    assert!((m.market.quotes[0].vol - 0.143).abs() < 1e-15);
    assert!((m.market.quotes[27].vol - 0.148).abs() < 1e-15);
    let five_five = m.find(5, 5).unwrap();
    assert_eq!(m.labels[five_five], "5Yx5Y");
    // Flat 6% annual compounding on a one-year grid.
    assert!((m.market.curve.discount(1).unwrap() - 1.0 / 1.06).abs() < 1e-15);
}

#[test]
fn csv_and_json_layouts_agree() {
    let json = parse_market_data(&fixture("sydney.json")).unwrap();
    let csv = parse_market_data(&fixture("sydney.csv")).unwrap();
    assert_eq!(json, csv);
}

#[test]
fn json_round_trip_is_field_identical() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["sydney.json", "sydney_bidask.json", "caplets_only.json", "inconsistent.json"] {
        let original = read_market_file(&fixture(name)).unwrap();
        let out = dir.path().join(name);
        write_market_json(&out, &original).unwrap();
        let again = read_market_file(&out).unwrap();
        assert_eq!(original, again, "{name}");
        assert_eq!(original.resolve().unwrap(), again.resolve().unwrap());
    }
}

#[test]
fn empty_swaption_list_is_valid() {
    let m = parse_market_data(&fixture("caplets_only.json")).unwrap();
    assert_eq!(m.market.quotes.len(), 20);
    assert!(m.market.quotes.iter().all(|q| q.tenor() == 1));
}

#[test]
fn duplicate_pair_is_a_validation_error() {
    match parse_market_data(&fixture("duplicate.json")) {
        Err(AppError::Validation(msg)) => assert!(msg.contains("duplicate swaption 5Yx5Y"), "{msg}"),
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn caplet_and_one_period_swaption_may_both_be_quoted() {
    // The same instrument in two lists is a data conflict for the solver to
    // certify, not a schema error.
    let m = parse_market_data(&fixture("inconsistent.json")).unwrap();
    assert_eq!(m.market.quotes.len(), 29);
}

#[test]
fn off_grid_and_out_of_range_quotes_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let base = read_market_file(&fixture("sydney.json")).unwrap();
    let mut off = base.clone();
    off.swaptions[0].tenor = 4.5;
    let mut past = base.clone();
    past.swaptions[0].expiry = 17.0;
    let mut neg = base.clone();
    neg.caplet_vols[3] = CapletVol::Pair(4.0, -1.0);
    let mut short_curve = base.clone();
    short_curve.curve = CurveSpec::Points((1..=10).map(|k| (k as f64, 1.06f64.powi(-k))).collect());
    for (name, file) in [("off", off), ("past", past), ("neg", neg), ("short", short_curve)] {
        let p = dir.path().join(format!("{name}.json"));
        write_market_json(&p, &file).unwrap();
        assert!(matches!(parse_market_data(&p), Err(AppError::Validation(_))), "{name}");
    }
}

#[test]
fn schema_violations_report_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let text = "{\n  \"calendar\": {\"period\": 1, \"horizon\": 2},\n  \"curve\": {\"flat_rate\": 0.05},\n  \"caplets\": []\n}\n";
    let p = write(dir.path(), "bad.json", text);
    match parse_market_data(&p) {
        Err(AppError::Parse { message, .. }) => assert!(message.contains("line 4") && message.contains("caplets"), "{message}"),
        other => panic!("{other:?}"),
    }
    let p = write(dir.path(), "bad.csv", "record,expiry,tenor,value,bid,ask\nperiod,,,1,,\nhorizon,,,2,,\ncaplet,1,,abc,,\n");
    match parse_market_data(&p) {
        Err(AppError::Parse { message, .. }) => assert!(message.contains("line 4"), "{message}"),
        other => panic!("{other:?}"),
    }
    let p = write(dir.path(), "kind.csv", "record,expiry,tenor,value,bid,ask\nperiod,,,1,,\nvolatility,1,,14,,\n");
    assert!(matches!(parse_market_data(&p), Err(AppError::Parse { .. })));
}

#[test]
fn explicit_curve_points_are_used() {
    let dir = tempfile::tempdir().unwrap();
    let file = MarketDataFile {
        curve: CurveSpec::Points(vec![(0.5, 0.98), (1.0, 0.96), (1.5, 0.94)]),
        ..serde_json::from_str::<MarketDataFile>(
            r#"{"calendar": {"period": 0.5, "horizon": 2}, "curve": {"flat_rate": 0.0}, "caplet_vols": [[0.5, 20.0], [1.0, 21.0]]}"#,
        )
        .unwrap()
    };
    let p = dir.path().join("half.json");
    write_market_json(&p, &file).unwrap();
    let m = parse_market_data(&p).unwrap();
    assert_eq!(m.labels, vec!["caplet 0.5Y", "caplet 1Y"]);
    assert_eq!(m.market.quotes[1].expiry, 2);
    assert_eq!(m.market.curve.discount(3).unwrap(), 0.94);
}

#[test]
fn targets_parse_in_years() {
    assert_eq!(parse_target("5x5").unwrap(), (5.0, 5.0));
    assert_eq!(parse_target("2Yx10Y").unwrap(), (2.0, 10.0));
    assert_eq!(target_indices(parse_target("1.5x0.5").unwrap(), 0.5).unwrap(), (3, 1));
    assert!(matches!(parse_target("5by5"), Err(AppError::Usage(_))));
    assert!(target_indices((1.25, 1.0), 0.5).is_err());
}

#[test]
fn matrix_csv_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let m = SymMatrix::from_fn(4, |i, j| ((i + 1) as f64 / (j + 3) as f64).sin() + (i + j) as f64 * std::f64::consts::PI * 1e-7);
    let p = write(dir.path(), "m.csv", &matrix_to_csv(&m));
    let back = read_matrix_csv(&p).unwrap();
    for (a, b) in m.as_slice().iter().zip(back.as_slice()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    for v in [f64::MIN_POSITIVE, 1.0 / 3.0, -2.0e300, 0.1 + 0.2] {
        assert_eq!(fmt_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
    }
}

#[test]
fn vectors_read_as_row_or_column() {
    let dir = tempfile::tempdir().unwrap();
    let row = write(dir.path(), "row.csv", "1,2,3\n");
    let col = write(dir.path(), "col.csv", "1\n2\n3\n");
    let bad = write(dir.path(), "bad.csv", "1,2\n3,4\n");
    assert_eq!(read_vector_csv(&row).unwrap(), vec![1.0, 2.0, 3.0]);
    assert_eq!(read_vector_csv(&col).unwrap(), vec![1.0, 2.0, 3.0]);
    assert!(read_vector_csv(&bad).is_err());
    let asym = write(dir.path(), "asym.csv", "1,2\n3,4\n");
    assert!(read_matrix_csv(&asym).is_err());
}

#[test]
fn scenario_files_are_checked_against_the_market() {
    let s = read_scenarios(&fixture("scenarios.json"), 28).unwrap();
    assert_eq!(s.len(), 3);
    assert_eq!(s[0].name, "caplet 5Y +1e-4");
    assert!(matches!(read_scenarios(&fixture("scenarios.json"), 27), Err(AppError::Validation(_))));
    let dir = tempfile::tempdir().unwrap();
    let bare = write(dir.path(), "bare.json", r#"[{"name": "a", "u": [1.0, 0.0]}]"#);
    assert_eq!(read_scenarios(&bare, 2).unwrap()[0].u, vec![1.0, 0.0]);
}
