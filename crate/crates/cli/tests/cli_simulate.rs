mod common;

use std::fs;
use std::path::Path;

use common::*;

fn simulate(out: &Path, extra: &[&str]) {
    let config = fixture("sim_tiny.json");
    let mut args = vec!["simulate", "--config", path(&config), "--out", path(out)];
    args.extend(extra);
    ok(&args);
}

fn summary(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn summary_validates_against_published_schema() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &[]);
    let schema: serde_json::Value = serde_json::from_str(msae_cli::schema::SUMMARY).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let instance = summary(dir.path());
    let errors: Vec<String> = validator.iter_errors(&instance).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");

    // the configuration file itself validates against its schema
    let schema: serde_json::Value = serde_json::from_str(msae_cli::schema::SIMULATION).unwrap();
    let config: serde_json::Value = serde_json::from_slice(&fs::read(fixture("sim_tiny.json")).unwrap()).unwrap();
    assert!(jsonschema::is_valid(&schema, &config));
    assert!(jsonschema::is_valid(&schema, &instance["config"]));
}

#[test]
fn scenario_flag_swaps_effect_scales() {
    let one = tempfile::tempdir().unwrap();
    let two = tempfile::tempdir().unwrap();
    simulate(one.path(), &["--replicates", "1"]);
    simulate(two.path(), &["--scenario", "2", "--replicates", "1"]);
    let (a, b) = (summary(one.path()), summary(two.path()));
    assert_eq!((a["config"]["sigma_a"].as_f64(), a["config"]["sigma_s"].as_f64()), (Some(0.08), Some(0.13)));
    assert_eq!((b["config"]["sigma_a"].as_f64(), b["config"]["sigma_s"].as_f64()), (Some(0.13), Some(0.08)));
    assert_eq!(b["scenario"], "2");
    assert_eq!(b["replicates"], 1);
}

#[test]
fn report_splits_oos_and_complete_areas() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &[]);
    let s = summary(dir.path());
    let rows = s["area_table"].as_array().unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r["estimator"].as_str().unwrap()).collect();
    for want in ["S-MS", "S-MS-Aggr", "SA-Aggr", "I-MS"] {
        assert!(labels.contains(&want), "{labels:?}");
    }
    for r in rows {
        for g in ["no_oos", "oos", "overall"] {
            assert!(r["mape"][g].is_number() && r["arrmse"][g].is_number(), "{r}");
        }
    }
    let (h, report) = read_csv(&dir.path().join("report.csv"));
    let oos = column(&h, "oos");
    assert!(report.iter().any(|r| r[oos] == "true") && report.iter().any(|r| r[oos] == "false"));
    assert!(dir.path().join("replicate_0001/estimates.csv").exists());
    assert!(dir.path().join("replicate_0002/estimates.csv").exists());
    let m = msae_cli::manifest::RunManifest::read(dir.path()).unwrap();
    assert!(m.extra["timing"].is_array());
    assert_eq!(m.seed, Some(5));
}

#[test]
fn seeded_rerun_is_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    simulate(a.path(), &["--replicates", "1"]);
    simulate(b.path(), &["--replicates", "1"]);
    assert_eq!(tree(a.path()), tree(b.path()));
}

#[test]
fn invalid_configuration_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"scenario": "1", "N": 10}"#).unwrap();
    let res = msae(&["simulate", "--config", path(&bad), "--out", path(&dir.path().join("o"))]);
    assert_eq!(code(&res), 1);
    let res = msae(&["simulate", "--scenario", "3", "--desk", "--out", path(&dir.path().join("o"))]);
    assert_eq!(code(&res), 1);
}

#[test]
fn schema_command_prints_valid_json() {
    for kind in ["model", "sampler", "simulation", "summary"] {
        let out = msae(&["schema", kind]);
        assert_eq!(code(&out), 0);
        let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert!(v["$schema"].is_string());
    }
}

#[test]
fn presets_and_defaults_validate_against_their_schemas() {
    use msae_cli::schema;
    use multiscale_sae::models::{ModelSpec, Variant};
    use multiscale_sae::sampler::SamplerConfig;
    use multiscale_sae::simulate::SimulationConfig;

    let check = |schema_text: &str, value: serde_json::Value| {
        let s: serde_json::Value = serde_json::from_str(schema_text).unwrap();
        let v = jsonschema::validator_for(&s).unwrap();
        let errors: Vec<String> = v.iter_errors(&value).map(|e| e.to_string()).collect();
        assert!(errors.is_empty(), "{errors:?}");
    };
    for s in [1, 2] {
        check(schema::SIMULATION, serde_json::to_value(SimulationConfig::full(s).unwrap()).unwrap());
        check(schema::SIMULATION, serde_json::to_value(SimulationConfig::desk(s).unwrap()).unwrap());
    }
    for v in Variant::ALL {
        check(schema::MODEL, serde_json::to_value(ModelSpec::new(v)).unwrap());
    }
    check(schema::SAMPLER, serde_json::to_value(SamplerConfig::default()).unwrap());
}
