//! Covariate tables: CSV ingestion, alignment with domain ids, and
//! column standardization.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::DesignMatrix;
use crate::error::{Error, Result};

/// A `domain_id,<col>,<col>,...` table. Empty cells are missing values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CovariateTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

impl CovariateTable {
    pub fn read_csv<R: Read>(reader: R, file: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.get(0) != Some("domain_id") {
            return Err(Error::Schema {
                file: file.to_owned(),
                row: 1,
                message: "first column must be domain_id".into(),
            });
        }
        let columns: Vec<String> = headers.iter().skip(1).map(str::to_owned).collect();
        let mut seen = BTreeSet::new();
        let mut rows = Vec::new();
        for (k, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = k + 2;
            let schema = |message: String| Error::Schema { file: file.to_owned(), row, message };
            let id = rec.get(0).unwrap_or_default().to_owned();
            if id.is_empty() {
                return Err(schema("empty domain_id".into()));
            }
            if !seen.insert(id.clone()) {
                return Err(schema(format!("duplicate domain_id `{id}`")));
            }
            let mut values = Vec::with_capacity(columns.len());
            for (c, name) in columns.iter().enumerate() {
                let cell = rec.get(c + 1).unwrap_or_default();
                if cell.is_empty() || cell.eq_ignore_ascii_case("na") {
                    values.push(None);
                    continue;
                }
                let v: f64 = cell.parse().map_err(|_| schema(format!("column `{name}`: `{cell}` is not a number")))?;
                if !v.is_finite() {
                    return Err(schema(format!("column `{name}` is not finite")));
                }
                values.push(Some(v));
            }
            rows.push((id, values));
        }
        Ok(Self { columns, rows })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["domain_id".to_owned()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for (id, vals) in &self.rows {
            let mut rec = vec![id.clone()];
            rec.extend(vals.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

/// Per-column centering and scaling applied at ingestion.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub columns: Vec<String>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    pub fn apply(&self, col: usize, x: f64) -> f64 {
        (x - self.mean[col]) / self.sd[col]
    }
}

/// Align `columns` of `table` with `ids` and standardize them.
///
/// Returns the design matrix (missing rows filled with zeros), a per-row
/// availability flag and the fitted standardizer. With no columns requested
/// every row is available.
pub(crate) fn design(
    ids: &[String],
    columns: &[String],
    table: Option<&CovariateTable>,
    level: &str,
) -> Result<(DesignMatrix, Vec<bool>, Standardizer)> {
    let n = ids.len();
    if columns.is_empty() {
        return Ok((DesignMatrix::zeros(n), vec![true; n], Standardizer::default()));
    }
    let table =
        table.ok_or_else(|| Error::input(format!("{level} covariates requested but no {level} table given")))?;
    let col_idx: Vec<usize> = columns
        .iter()
        .map(|c| table.column_index(c).ok_or_else(|| Error::input(format!("{level} covariate `{c}` not in table"))))
        .collect::<Result<_>>()?;
    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let unknown: Vec<&str> =
        table.rows.iter().map(|(id, _)| id.as_str()).filter(|id| !index.contains_key(id)).collect();
    if !unknown.is_empty() {
        return Err(Error::input(format!("{level} covariates for unknown domains: {}", unknown.join(", "))));
    }
    let mut raw: Vec<Option<Vec<f64>>> = vec![None; n];
    for (id, vals) in &table.rows {
        let row: Option<Vec<f64>> = col_idx.iter().map(|&c| vals[c]).collect();
        raw[index[id.as_str()]] = row;
    }
    let avail: Vec<bool> = raw.iter().map(Option::is_some).collect();
    let p = columns.len();
    let mut mean = vec![0.0; p];
    let mut sd = vec![1.0; p];
    let present: Vec<&Vec<f64>> = raw.iter().flatten().collect();
    if !present.is_empty() {
        let k = present.len() as f64;
        for c in 0..p {
            let m = present.iter().map(|r| r[c]).sum::<f64>() / k;
            let var = present.iter().map(|r| (r[c] - m).powi(2)).sum::<f64>() / (k - 1.0).max(1.0);
            mean[c] = m;
            sd[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
    }
    let st = Standardizer { columns: columns.to_vec(), mean, sd };
    let mut values = Vec::with_capacity(n * p);
    for r in &raw {
        match r {
            Some(r) => values.extend(r.iter().enumerate().map(|(c, &x)| st.apply(c, x))),
            None => values.extend(std::iter::repeat_n(0.0, p)),
        }
    }
    Ok((DesignMatrix { columns: columns.to_vec(), rows: n, values }, avail, st))
}
