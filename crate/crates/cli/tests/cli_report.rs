mod common;

use std::fs;

use common::*;

#[test]
fn report_joins_direct_and_model_estimates() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("direct");
    direct(&d);
    let b = dir.path().join("bench");
    ok(&[
        "benchmark",
        "--draws",
        path(&fixture("bench_draws.csv")),
        "--shares",
        path(&fixture("shares.csv")),
        "--t",
        "0.2",
        "--out",
        path(&b),
    ]);
    let r = dir.path().join("report");
    ok(&[
        "report",
        "--estimates",
        path(&b.join("estimates.csv")),
        "--direct",
        path(&d.join("direct.csv")),
        "--shares",
        path(&fixture("shares.csv")),
        "--out",
        path(&r),
    ]);
    let (h, rows) = read_csv(&r.join("comparison.csv"));
    assert_eq!(rows.len(), 9);
    let oos = rows.iter().find(|row| row[0] == "south-2").unwrap();
    assert_eq!(oos[column(&h, "in_sample")], "false");
    assert_eq!(oos[column(&h, "direct")], "");
    assert_ne!(oos[column(&h, "estimate")], "");
    let north = rows.iter().find(|row| row[0] == "north").unwrap();
    let y: f64 = north[column(&h, "direct")].parse().unwrap();
    let n_eff: f64 = north[column(&h, "n_eff")].parse().unwrap();
    let cv: f64 = north[column(&h, "cv_direct")].parse().unwrap();
    assert!((cv - (y * (1.0 - y) / n_eff).sqrt() / y).abs() < 1e-12);

    let s: serde_json::Value = serde_json::from_slice(&fs::read(r.join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["levels"]["subarea"]["out_of_sample"], 1);
    assert!(s["max_coherence_gap"].as_f64().unwrap() < 1e-12);
}

#[test]
fn unknown_estimate_domain_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("direct");
    direct(&d);
    let est = dir.path().join("est.csv");
    fs::write(
        &est,
        "domain_id,level,estimate,sd,q05,q50,q95,provenance\natlantis,area,0.2,0.1,0.1,0.2,0.3,aggregated\n",
    )
    .unwrap();
    let res = msae(&[
        "report",
        "--estimates",
        path(&est),
        "--direct",
        path(&d.join("direct.csv")),
        "--shares",
        path(&fixture("shares.csv")),
        "--out",
        path(&dir.path().join("r")),
    ]);
    assert_eq!(code(&res), 1);
    assert!(stderr(&res).contains("atlantis"));
}
