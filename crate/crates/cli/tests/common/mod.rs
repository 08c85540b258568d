#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn msae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msae")).args(args).output().expect("msae runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Run and require success, printing stderr on failure.
pub fn ok(args: &[&str]) {
    let out = msae(args);
    assert_eq!(code(&out), 0, "msae {args:?} failed: {}", stderr(&out));
}

pub fn direct(out: &Path) {
    ok(&[
        "direct",
        "--survey",
        path(&fixture("survey.csv")),
        "--shares",
        path(&fixture("shares.csv")),
        "--out",
        path(out),
    ]);
}

/// Arguments of a short toy fit on the fixtures.
pub fn fit_args<'a>(direct_csv: &'a str, out: &'a str, extra: &[&'a str]) -> Vec<String> {
    let mut v: Vec<String> = vec![
        "fit".into(),
        "--direct".into(),
        direct_csv.into(),
        "--shares".into(),
        path(&fixture("shares.csv")).into(),
        "--area-covariates".into(),
        path(&fixture("area_covariates.csv")).into(),
        "--subarea-covariates".into(),
        path(&fixture("subarea_covariates.csv")).into(),
        "--out".into(),
        out.into(),
    ];
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

pub fn run_owned(args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    msae(&refs)
}

/// Every file below `dir` except the manifest, keyed by relative path.
pub fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if p.file_name().unwrap() != "manifest.json" {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

pub fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(str::to_owned).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(str::to_owned).collect()).collect();
    (header, rows)
}

pub fn column(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"))
}
