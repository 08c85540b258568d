//! Design-weighted direct estimation at the area and sub-area level.
//!
//! Direct estimates are Hájek ratios. Their design effects come from a
//! with-replacement first-stage (cluster) linearization within strata,
//! compared against the binomial variance of a simple random sample of the
//! same size.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the national shares summing to one.
pub const SHARE_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Area,
    Subarea,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Level::Area => f.write_str("area"),
            Level::Subarea => f.write_str("subarea"),
        }
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "area" => Ok(Level::Area),
            "subarea" => Ok(Level::Subarea),
            other => Err(Error::input(format!("unknown level `{other}`"))),
        }
    }
}

/// One sampled unit. `household_id` is optional; when every unit of a domain
/// carries one, the censoring exponent counts distinct households.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurveyRecord {
    pub area_id: String,
    pub subarea_id: String,
    pub cluster_id: String,
    pub stratum_id: String,
    pub weight: f64,
    pub poor: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub household_id: Option<String>,
}

/// A row of the population-shares file: `q` is the national population
/// share of the sub-area.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShareRow {
    pub subarea_id: String,
    pub area_id: String,
    pub q: f64,
}

/// The universe of domains and their population shares.
///
/// Areas and sub-areas are indexed in order of first appearance in the
/// shares table. Sub-areas absent from the survey are still registered; they
/// are the out-of-sample domains.
#[derive(Clone, Debug)]
pub struct DomainRegistry {
    pub areas: Vec<String>,
    pub subareas: Vec<String>,
    pub subarea_area: Vec<usize>,
    /// q_dj, national share of each sub-area.
    pub national_share: Vec<f64>,
    /// s_d, national share of each area.
    pub area_share: Vec<f64>,
    /// s_dj, share of each sub-area within its area.
    pub subarea_share: Vec<f64>,
    area_index: HashMap<String, usize>,
    subarea_index: HashMap<String, usize>,
}

impl DomainRegistry {
    pub fn from_shares(rows: &[ShareRow]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::input("population shares table is empty"));
        }
        let mut areas = Vec::new();
        let mut area_index = HashMap::new();
        let mut subareas = Vec::with_capacity(rows.len());
        let mut subarea_index = HashMap::new();
        let mut subarea_area = Vec::with_capacity(rows.len());
        let mut national_share = Vec::with_capacity(rows.len());
        for (k, row) in rows.iter().enumerate() {
            if !(row.q.is_finite() && row.q > 0.0) {
                return Err(Error::Schema {
                    file: "shares".into(),
                    row: k + 2,
                    message: format!("share q must be positive, got {}", row.q),
                });
            }
            let a = *area_index.entry(row.area_id.clone()).or_insert_with(|| {
                areas.push(row.area_id.clone());
                areas.len() - 1
            });
            if subarea_index.insert(row.subarea_id.clone(), subareas.len()).is_some() {
                return Err(Error::Schema {
                    file: "shares".into(),
                    row: k + 2,
                    message: format!("sub-area `{}` listed twice", row.subarea_id),
                });
            }
            subareas.push(row.subarea_id.clone());
            subarea_area.push(a);
            national_share.push(row.q);
        }
        let total: f64 = national_share.iter().sum();
        if (total - 1.0).abs() > SHARE_TOLERANCE {
            return Err(Error::input(format!("national shares sum to {total}, expected 1 within {SHARE_TOLERANCE}")));
        }
        let mut area_share = vec![0.0; areas.len()];
        for (j, &a) in subarea_area.iter().enumerate() {
            area_share[a] += national_share[j];
        }
        let subarea_share = subarea_area.iter().zip(&national_share).map(|(&a, &q)| q / area_share[a]).collect();
        Ok(Self { areas, subareas, subarea_area, national_share, area_share, subarea_share, area_index, subarea_index })
    }

    pub fn n_areas(&self) -> usize {
        self.areas.len()
    }

    pub fn n_subareas(&self) -> usize {
        self.subareas.len()
    }

    pub fn area_idx(&self, id: &str) -> Option<usize> {
        self.area_index.get(id).copied()
    }

    pub fn subarea_idx(&self, id: &str) -> Option<usize> {
        self.subarea_index.get(id).copied()
    }

    /// Sub-area indices belonging to area `a`, in registry order.
    pub fn subareas_of(&self, a: usize) -> Vec<usize> {
        (0..self.subareas.len()).filter(|&j| self.subarea_area[j] == a).collect()
    }

    pub fn share_rows(&self) -> Vec<ShareRow> {
        (0..self.subareas.len())
            .map(|j| ShareRow {
                subarea_id: self.subareas[j].clone(),
                area_id: self.areas[self.subarea_area[j]].clone(),
                q: self.national_share[j],
            })
            .collect()
    }
}

/// Survey microdata validated against a domain registry.
#[derive(Clone, Debug)]
pub struct SurveyDataset {
    pub records: Vec<SurveyRecord>,
    pub registry: DomainRegistry,
    rec_subarea: Vec<usize>,
    rec_cluster: Vec<usize>,
    cluster_stratum: Vec<usize>,
    stratum_sizes: Vec<usize>,
}

impl SurveyDataset {
    pub fn new(records: Vec<SurveyRecord>, registry: DomainRegistry) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::input("survey contains no records"));
        }
        let mut rec_subarea = Vec::with_capacity(records.len());
        let mut rec_cluster = Vec::with_capacity(records.len());
        let mut clusters: HashMap<(&str, &str), usize> = HashMap::new();
        let mut strata: HashMap<&str, usize> = HashMap::new();
        let mut cluster_stratum = Vec::new();
        for (k, r) in records.iter().enumerate() {
            let row = k + 2;
            let bad = |message: String| Error::Schema { file: "survey".into(), row, message };
            if !(r.weight.is_finite() && r.weight > 0.0) {
                return Err(bad(format!("weight must be positive, got {}", r.weight)));
            }
            if r.poor > 1 {
                return Err(bad(format!("poor must be 0 or 1, got {}", r.poor)));
            }
            let j = registry
                .subarea_idx(&r.subarea_id)
                .ok_or_else(|| bad(format!("sub-area `{}` not in shares table", r.subarea_id)))?;
            let expected = &registry.areas[registry.subarea_area[j]];
            if *expected != r.area_id {
                return Err(bad(format!(
                    "sub-area `{}` belongs to area `{}`, record says `{}`",
                    r.subarea_id, expected, r.area_id
                )));
            }
            let n_strata = strata.len();
            let h = *strata.entry(r.stratum_id.as_str()).or_insert(n_strata);
            let n_clusters = clusters.len();
            let c = *clusters.entry((r.stratum_id.as_str(), r.cluster_id.as_str())).or_insert_with(|| {
                cluster_stratum.push(h);
                n_clusters
            });
            rec_subarea.push(j);
            rec_cluster.push(c);
        }
        let mut stratum_sizes = vec![0; strata.len()];
        for &h in &cluster_stratum {
            stratum_sizes[h] += 1;
        }
        Ok(Self { records, registry, rec_subarea, rec_cluster, cluster_stratum, stratum_sizes })
    }

    fn units_in(&self, level: Level, idx: usize) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| {
                let j = self.rec_subarea[i];
                match level {
                    Level::Subarea => j == idx,
                    Level::Area => self.registry.subarea_area[j] == idx,
                }
            })
            .collect()
    }

    fn hajek(&self, units: &[usize]) -> Option<f64> {
        if units.is_empty() {
            return None;
        }
        let (num, den) = units.iter().fold((0.0, 0.0), |(n, d), &i| {
            let r = &self.records[i];
            (n + r.weight * f64::from(r.poor), d + r.weight)
        });
        Some(num / den)
    }

    /// Sum of weights of sampled units in a sub-area.
    pub fn subarea_weight_total(&self, j: usize) -> f64 {
        self.units_in(Level::Subarea, j).iter().map(|&i| self.records[i].weight).sum()
    }

    /// With-replacement cluster linearization variance of the domain's Hájek
    /// ratio, plus the number of distinct clusters the domain touches.
    fn linearized_variance(&self, units: &[usize], estimate: f64) -> (f64, usize) {
        let w_total: f64 = units.iter().map(|&i| self.records[i].weight).sum();
        let mut z: HashMap<usize, f64> = HashMap::new();
        for &i in units {
            let r = &self.records[i];
            *z.entry(self.rec_cluster[i]).or_insert(0.0) += r.weight * (f64::from(r.poor) - estimate) / w_total;
        }
        let n_clusters = z.len();
        let mut per_stratum: HashMap<usize, Vec<f64>> = HashMap::new();
        for (&c, &zc) in &z {
            per_stratum.entry(self.cluster_stratum[c]).or_default().push(zc);
        }
        let mut strata: Vec<_> = per_stratum.into_iter().collect();
        strata.sort_by_key(|(h, _)| *h);
        let mut var = 0.0;
        for (h, mut zs) in strata {
            let n_h = self.stratum_sizes[h];
            if n_h < 2 {
                continue;
            }
            zs.sort_by(f64::total_cmp);
            let n = n_h as f64;
            let mean = zs.iter().sum::<f64>() / n;
            let ss: f64 = zs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() + (n_h - zs.len()) as f64 * mean * mean;
            var += n / (n - 1.0) * ss;
        }
        (var, n_clusters)
    }

    fn censor_count(&self, units: &[usize]) -> u32 {
        let all_have_households = units.iter().all(|&i| self.records[i].household_id.is_some());
        if all_have_households {
            let mut ids: Vec<(&str, &str)> = units
                .iter()
                .map(|&i| {
                    let r = &self.records[i];
                    (r.cluster_id.as_str(), r.household_id.as_deref().unwrap_or_default())
                })
                .collect();
            ids.sort_unstable();
            ids.dedup();
            ids.len() as u32
        } else {
            units.len() as u32
        }
    }
}

/// Hájek estimate for one sub-area; `Ok(None)` signals an out-of-sample domain.
pub fn hajek_subarea(data: &SurveyDataset, subarea_id: &str) -> Result<Option<f64>> {
    let j = data
        .registry
        .subarea_idx(subarea_id)
        .ok_or_else(|| Error::input(format!("unknown sub-area `{subarea_id}`")))?;
    Ok(data.hajek(&data.units_in(Level::Subarea, j)))
}

/// Hájek estimate for one area over all of its sampled units.
pub fn hajek_area(data: &SurveyDataset, area_id: &str) -> Result<Option<f64>> {
    let a = data.registry.area_idx(area_id).ok_or_else(|| Error::input(format!("unknown area `{area_id}`")))?;
    Ok(data.hajek(&data.units_in(Level::Area, a)))
}

/// How the design effect of a domain was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeffSource {
    Linearized,
    /// Only one sampled cluster: the design effect falls back to 1.
    SingleCluster,
    /// Boundary estimate or degenerate variance: median of same-level domains.
    Imputed,
    OutOfSample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectEstimate {
    pub domain_id: String,
    pub level: Level,
    pub estimate: Option<f64>,
    pub sample_size: usize,
    pub effective_size: Option<f64>,
    pub design_effect: Option<f64>,
    pub censor_exponent: u32,
    pub in_sample: bool,
    #[serde(skip)]
    pub deff_source: Option<DeffSource>,
}

impl DirectEstimate {
    pub fn out_of_sample(domain_id: String, level: Level) -> Self {
        Self {
            domain_id,
            level,
            estimate: None,
            sample_size: 0,
            effective_size: None,
            design_effect: None,
            censor_exponent: 0,
            in_sample: false,
            deff_source: Some(DeffSource::OutOfSample),
        }
    }
}

/// Direct estimates for every registered domain, in registry order.
#[derive(Clone, Debug)]
pub struct DirectEstimates {
    pub areas: Vec<DirectEstimate>,
    pub subareas: Vec<DirectEstimate>,
}

impl DirectEstimates {
    pub fn level(&self, level: Level) -> &[DirectEstimate] {
        match level {
            Level::Area => &self.areas,
            Level::Subarea => &self.subareas,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &DirectEstimate> {
        self.areas.iter().chain(&self.subareas)
    }
}

/// Linearized variances below this fraction of the binomial variance are
/// cancellation noise (identical cluster means) and count as degenerate.
const DEGENERATE_VARIANCE: f64 = 1e-10;

fn median(xs: &mut [f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) })
}

fn level_estimates(data: &SurveyDataset, level: Level) -> Vec<DirectEstimate> {
    let ids = match level {
        Level::Area => &data.registry.areas,
        Level::Subarea => &data.registry.subareas,
    };
    let mut out: Vec<DirectEstimate> = Vec::with_capacity(ids.len());
    for (idx, id) in ids.iter().enumerate() {
        let units = data.units_in(level, idx);
        let Some(estimate) = data.hajek(&units) else {
            out.push(DirectEstimate::out_of_sample(id.clone(), level));
            continue;
        };
        let n = units.len();
        let (var, n_clusters) = data.linearized_variance(&units, estimate);
        let binomial = estimate * (1.0 - estimate) / n as f64;
        let (deff, source) = if n_clusters < 2 {
            (Some(1.0), DeffSource::SingleCluster)
        } else if binomial > 0.0 && var > DEGENERATE_VARIANCE * binomial {
            (Some(var / binomial), DeffSource::Linearized)
        } else {
            (None, DeffSource::Imputed)
        };
        let mut m = data.censor_count(&units);
        if estimate > 0.0 && estimate < 1.0 {
            // An interior estimate needs at least two distinct units.
            m = m.max(2);
        }
        out.push(DirectEstimate {
            domain_id: id.clone(),
            level,
            estimate: Some(estimate),
            sample_size: n,
            effective_size: None,
            design_effect: deff,
            censor_exponent: m,
            in_sample: true,
            deff_source: Some(source),
        });
    }
    let mut linearized: Vec<f64> =
        out.iter().filter(|e| e.deff_source == Some(DeffSource::Linearized)).filter_map(|e| e.design_effect).collect();
    let fallback = median(&mut linearized).unwrap_or(1.0);
    for e in out.iter_mut().filter(|e| e.in_sample) {
        let deff = *e.design_effect.get_or_insert(fallback);
        e.effective_size = Some((e.sample_size as f64 / deff).max(1.0));
    }
    out
}

/// Direct estimates with design effects and effective sample sizes for
/// every area and sub-area in the registry.
pub fn direct_estimates(data: &SurveyDataset) -> DirectEstimates {
    DirectEstimates { areas: level_estimates(data, Level::Area), subareas: level_estimates(data, Level::Subarea) }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EffectiveSize {
    pub effective_size: f64,
    pub design_effect: f64,
    pub censor_exponent: u32,
}

/// Effective sample size, design effect and censoring exponent of every
/// in-sample domain, keyed by (level, domain id).
pub fn effective_sample_sizes(data: &SurveyDataset) -> Vec<((Level, String), EffectiveSize)> {
    direct_estimates(data)
        .iter()
        .filter(|e| e.in_sample)
        .map(|e| {
            (
                (e.level, e.domain_id.clone()),
                EffectiveSize {
                    effective_size: e.effective_size.unwrap_or(1.0),
                    design_effect: e.design_effect.unwrap_or(1.0),
                    censor_exponent: e.censor_exponent,
                },
            )
        })
        .collect()
}

// ---------------------------------------------------------------------------
// CSV I/O

fn read_rows<T: for<'de> Deserialize<'de>>(reader: impl Read, file: &str, header: &[&str]) -> Result<Vec<T>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let found: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    for h in header {
        if !found.iter().any(|f| f == h) {
            return Err(Error::Schema {
                file: file.into(),
                row: 1,
                message: format!("missing column `{h}` (header: {})", found.join(",")),
            });
        }
    }
    let mut out = Vec::new();
    for (k, row) in rdr.deserialize().enumerate() {
        let row: T = row.map_err(|e| Error::Schema { file: file.into(), row: k + 2, message: e.to_string() })?;
        out.push(row);
    }
    Ok(out)
}

pub const SURVEY_HEADER: [&str; 6] = ["area_id", "subarea_id", "cluster_id", "stratum_id", "weight", "poor"];
pub const SHARES_HEADER: [&str; 3] = ["subarea_id", "area_id", "q"];
pub const DIRECT_HEADER: [&str; 8] = ["domain_id", "level", "estimate", "n", "deff", "n_eff", "m", "in_sample"];

pub fn read_survey_csv(reader: impl Read) -> Result<Vec<SurveyRecord>> {
    read_rows(reader, "survey", &SURVEY_HEADER)
}

pub fn read_shares_csv(reader: impl Read) -> Result<Vec<ShareRow>> {
    read_rows(reader, "shares", &SHARES_HEADER)
}

pub fn write_survey_csv(writer: impl Write, records: &[SurveyRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let with_households = records.iter().any(|r| r.household_id.is_some());
    if with_households {
        w.write_record(SURVEY_HEADER.iter().copied().chain(["household_id"]))?;
    } else {
        w.write_record(SURVEY_HEADER)?;
    }
    for r in records {
        let mut row = vec![
            r.area_id.clone(),
            r.subarea_id.clone(),
            r.cluster_id.clone(),
            r.stratum_id.clone(),
            r.weight.to_string(),
            r.poor.to_string(),
        ];
        if with_households {
            row.push(r.household_id.clone().unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_shares_csv(writer: impl Write, rows: &[ShareRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SHARES_HEADER)?;
    for r in rows {
        w.write_record([r.subarea_id.as_str(), r.area_id.as_str(), &r.q.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn opt_to_string(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_direct_csv(writer: impl Write, estimates: &DirectEstimates) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(DIRECT_HEADER)?;
    for e in estimates.iter() {
        w.write_record([
            e.domain_id.clone(),
            e.level.to_string(),
            opt_to_string(e.estimate),
            e.sample_size.to_string(),
            opt_to_string(e.design_effect),
            opt_to_string(e.effective_size),
            e.censor_exponent.to_string(),
            e.in_sample.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct DirectRow {
    domain_id: String,
    level: String,
    estimate: Option<f64>,
    n: usize,
    deff: Option<f64>,
    n_eff: Option<f64>,
    m: u32,
    in_sample: bool,
}

/// Read a direct-estimates table back and align it with `registry`.
pub fn read_direct_csv(reader: impl Read, registry: &DomainRegistry) -> Result<DirectEstimates> {
    let rows: Vec<DirectRow> = read_rows(reader, "direct", &DIRECT_HEADER)?;
    let mut areas: Vec<Option<DirectEstimate>> = vec![None; registry.n_areas()];
    let mut subareas: Vec<Option<DirectEstimate>> = vec![None; registry.n_subareas()];
    let mut unknown = Vec::new();
    for (k, r) in rows.into_iter().enumerate() {
        let level: Level = r.level.parse().map_err(|e: Error| Error::Schema {
            file: "direct".into(),
            row: k + 2,
            message: e.to_string(),
        })?;
        let slot = match level {
            Level::Area => registry.area_idx(&r.domain_id).map(|i| &mut areas[i]),
            Level::Subarea => registry.subarea_idx(&r.domain_id).map(|i| &mut subareas[i]),
        };
        let Some(slot) = slot else {
            unknown.push(format!("{level}:{}", r.domain_id));
            continue;
        };
        if r.in_sample && (r.estimate.is_none() || r.n_eff.is_none()) {
            return Err(Error::Schema {
                file: "direct".into(),
                row: k + 2,
                message: "in-sample domain without estimate or n_eff".into(),
            });
        }
        *slot = Some(DirectEstimate {
            domain_id: r.domain_id,
            level,
            estimate: r.estimate,
            sample_size: r.n,
            effective_size: r.n_eff,
            design_effect: r.deff,
            censor_exponent: r.m,
            in_sample: r.in_sample,
            deff_source: None,
        });
    }
    if !unknown.is_empty() {
        return Err(Error::input(format!("direct estimates for unregistered domains: {}", unknown.join(", "))));
    }
    let fill = |v: Vec<Option<DirectEstimate>>, ids: &[String], level| {
        v.into_iter()
            .zip(ids)
            .map(|(e, id)| e.unwrap_or_else(|| DirectEstimate::out_of_sample(id.clone(), level)))
            .collect()
    };
    Ok(DirectEstimates {
        areas: fill(areas, &registry.areas, Level::Area),
        subareas: fill(subareas, &registry.subareas, Level::Subarea),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn rec(area: &str, sub: &str, cluster: &str, stratum: &str, w: f64, y: u8) -> SurveyRecord {
        SurveyRecord {
            area_id: area.into(),
            subarea_id: sub.into(),
            cluster_id: cluster.into(),
            stratum_id: stratum.into(),
            weight: w,
            poor: y,
            household_id: None,
        }
    }

    fn shares(spec: &[(&str, &str, f64)]) -> DomainRegistry {
        let rows: Vec<ShareRow> = spec
            .iter()
            .map(|(s, a, q)| ShareRow { subarea_id: s.to_string(), area_id: a.to_string(), q: *q })
            .collect();
        DomainRegistry::from_shares(&rows).unwrap()
    }

    #[test]
    fn equal_weights_reduce_to_mean() {
        let reg = shares(&[("s1", "a1", 1.0)]);
        let recs =
            [0, 1, 1, 0].iter().enumerate().map(|(i, &y)| rec("a1", "s1", &i.to_string(), "h", 1.0, y)).collect();
        let data = SurveyDataset::new(recs, reg).unwrap();
        assert_eq!(hajek_subarea(&data, "s1").unwrap(), Some(0.5));
    }

    #[test]
    fn unequal_weights() {
        let reg = shares(&[("s1", "a1", 1.0)]);
        let recs = vec![rec("a1", "s1", "c1", "h", 2.0, 1), rec("a1", "s1", "c2", "h", 1.0, 0)];
        let data = SurveyDataset::new(recs, reg).unwrap();
        let est = hajek_subarea(&data, "s1").unwrap().unwrap();
        assert!((est - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn random_fixture_matches_spreadsheet_sums() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let reg = shares(&[("s1", "a1", 0.5), ("s2", "a1", 0.5)]);
        let mut recs = Vec::new();
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..20 {
            let w: f64 = rng.random_range(0.5..5.0);
            let y: u8 = rng.random_range(0..2);
            if i % 2 == 0 {
                num += w * y as f64;
                den += w;
            }
            recs.push(rec("a1", if i % 2 == 0 { "s1" } else { "s2" }, &format!("c{i}"), "h", w, y));
        }
        let data = SurveyDataset::new(recs, reg).unwrap();
        let est = hajek_subarea(&data, "s1").unwrap().unwrap();
        assert!((est - num / den).abs() < 1e-14);
    }

    #[test]
    fn out_of_sample_subarea_has_no_estimate() {
        let reg = shares(&[("s1", "a1", 0.5), ("s2", "a1", 0.5)]);
        let data = SurveyDataset::new(vec![rec("a1", "s1", "c", "h", 1.0, 1)], reg).unwrap();
        assert_eq!(hajek_subarea(&data, "s2").unwrap(), None);
        let d = direct_estimates(&data);
        assert!(!d.subareas[1].in_sample);
        assert_eq!(d.subareas[1].sample_size, 0);
        assert!(hajek_subarea(&data, "nope").is_err());
    }

    #[test]
    fn single_subarea_area_matches_subarea() {
        let reg = shares(&[("s1", "a1", 1.0)]);
        let recs = vec![rec("a1", "s1", "c1", "h", 3.0, 1), rec("a1", "s1", "c2", "h", 1.0, 0)];
        let data = SurveyDataset::new(recs, reg).unwrap();
        assert_eq!(hajek_area(&data, "a1").unwrap(), hajek_subarea(&data, "s1").unwrap());
    }

    #[test]
    fn area_aggregation_hand_example() {
        // weight sums (10, 30), sub-area estimates (0.1, 0.5) -> 0.4
        let reg = shares(&[("s1", "a1", 0.5), ("s2", "a1", 0.5)]);
        let mut recs = Vec::new();
        recs.push(rec("a1", "s1", "c1", "h", 1.0, 1));
        for i in 0..9 {
            recs.push(rec("a1", "s1", &format!("c1{i}"), "h", 1.0, 0));
        }
        recs.push(rec("a1", "s2", "c2", "h", 15.0, 1));
        recs.push(rec("a1", "s2", "c3", "h", 15.0, 0));
        let data = SurveyDataset::new(recs, reg).unwrap();
        let est = hajek_area(&data, "a1").unwrap().unwrap();
        assert!((est - 0.4).abs() < 1e-15);
    }

    #[test]
    fn deff_of_simple_random_sample_is_about_one() {
        let reg = shares(&[("s1", "a1", 1.0)]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let recs =
            (0..400).map(|i| rec("a1", "s1", &format!("c{i}"), "h", 1.0, u8::from(rng.random_bool(0.3)))).collect();
        let data = SurveyDataset::new(recs, reg).unwrap();
        let d = direct_estimates(&data);
        let deff = d.subareas[0].design_effect.unwrap();
        // exactly n / (n - 1) for this design
        assert!((deff - 400.0 / 399.0).abs() < 1e-9, "deff = {deff}");
        let ness = d.subareas[0].effective_size.unwrap();
        assert!((ness - 400.0 / deff).abs() < 1e-9);
    }

    #[test]
    fn single_cluster_domain_falls_back_to_unit_deff() {
        let reg = shares(&[("s1", "a1", 1.0)]);
        let recs = vec![rec("a1", "s1", "c", "h", 1.0, 1), rec("a1", "s1", "c", "h", 1.0, 0)];
        let data = SurveyDataset::new(recs, reg).unwrap();
        let d = direct_estimates(&data);
        assert_eq!(d.subareas[0].design_effect, Some(1.0));
        assert_eq!(d.subareas[0].deff_source, Some(DeffSource::SingleCluster));
    }

    #[test]
    fn boundary_estimate_gets_median_deff() {
        let reg = shares(&[("s1", "a1", 0.5), ("s2", "a1", 0.5)]);
        let mut recs = Vec::new();
        for i in 0..10 {
            recs.push(rec("a1", "s1", &format!("c{i}"), "h", 1.0, (i % 3 == 0) as u8));
            recs.push(rec("a1", "s2", &format!("d{i}"), "h", 1.0, 0));
        }
        let data = SurveyDataset::new(recs, reg).unwrap();
        let d = direct_estimates(&data);
        assert_eq!(d.subareas[1].estimate, Some(0.0));
        assert_eq!(d.subareas[1].deff_source, Some(DeffSource::Imputed));
        assert_eq!(d.subareas[1].design_effect, d.subareas[0].design_effect);
    }

    #[test]
    fn identical_cluster_means_are_degenerate_under_any_weight_scale() {
        let reg = shares(&[("s1", "a1", 1.0)]);
        for w in [1.0, 3.7, 1e-3] {
            let recs = (0..4)
                .flat_map(|c| (0..8).map(move |i| rec("a1", "s1", &format!("c{c}"), "h", w, u8::from(i == 0))))
                .collect();
            let d = direct_estimates(&SurveyDataset::new(recs, reg.clone()).unwrap());
            assert!((d.subareas[0].estimate.unwrap() - 0.125).abs() < 1e-15);
            assert_eq!(d.subareas[0].deff_source, Some(DeffSource::Imputed), "weight {w}");
        }
    }

    #[test]
    fn effective_size_formula_and_floor() {
        // n = 100, DEff = 2 -> 50 is the direct formula; check the floor at 1
        assert_eq!((100.0_f64 / 2.0).max(1.0), 50.0);
        let reg = shares(&[("s1", "a1", 1.0)]);
        let recs = vec![
            rec("a1", "s1", "c1", "h", 1.0, 1),
            rec("a1", "s1", "c1", "h", 1.0, 1),
            rec("a1", "s1", "c2", "h", 1.0, 0),
            rec("a1", "s1", "c2", "h", 1.0, 0),
        ];
        let data = SurveyDataset::new(recs, reg).unwrap();
        let d = direct_estimates(&data);
        // perfectly homogeneous clusters of size 2 -> DEff = 2 * 2/1 * ... >= 1
        assert!(d.subareas[0].effective_size.unwrap() >= 1.0);
    }

    #[test]
    fn homogeneous_clusters_deff_near_cluster_size() {
        // Oracle: brute-force resampling variance of the estimator under the
        // design (draw clusters, all members share status) vs binomial variance.
        let cluster_size = 8usize;
        let n_clusters = 60usize;
        let p = 0.3;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<u8> {
            (0..n_clusters).map(|_| u8::from(rng.random_bool(p))).collect()
        };
        let mut ests = Vec::new();
        for _ in 0..10_000 {
            let st = draw(&mut rng);
            ests.push(st.iter().map(|&s| s as f64).sum::<f64>() / n_clusters as f64);
        }
        let mean = ests.iter().sum::<f64>() / ests.len() as f64;
        let var = ests.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (ests.len() - 1) as f64;
        let n = (cluster_size * n_clusters) as f64;
        let brute_deff = var / (p * (1.0 - p) / n);
        assert!((brute_deff - cluster_size as f64).abs() / (cluster_size as f64) < 0.1);

        let reg = shares(&[("s1", "a1", 1.0)]);
        let mut deffs = Vec::new();
        for _ in 0..200 {
            let st = draw(&mut rng);
            let recs: Vec<SurveyRecord> = (0..n_clusters)
                .flat_map(|c| std::iter::repeat_n((c, st[c]), cluster_size))
                .map(|(c, y)| rec("a1", "s1", &format!("c{c}"), "h", 1.0, y))
                .collect();
            let data = SurveyDataset::new(recs, reg.clone()).unwrap();
            let d = direct_estimates(&data);
            if d.subareas[0].deff_source == Some(DeffSource::Linearized) {
                deffs.push(d.subareas[0].design_effect.unwrap());
            }
        }
        let avg = deffs.iter().sum::<f64>() / deffs.len() as f64;
        assert!((avg - brute_deff).abs() / brute_deff < 0.1, "linearized {avg} vs brute {brute_deff}");
    }

    #[test]
    fn household_ids_drive_censor_exponent() {
        let reg = shares(&[("s1", "a1", 1.0)]);
        let mut recs = Vec::new();
        for i in 0..6 {
            let mut r = rec("a1", "s1", &format!("c{}", i / 3), "h", 1.0, (i / 3) as u8);
            r.household_id = Some(format!("hh{}", i / 3));
            recs.push(r);
        }
        let data = SurveyDataset::new(recs, reg).unwrap();
        assert_eq!(direct_estimates(&data).subareas[0].censor_exponent, 2);
    }

    #[test]
    fn validation_errors_carry_row_numbers() {
        let reg = shares(&[("s1", "a1", 1.0)]);
        let err = SurveyDataset::new(
            vec![rec("a1", "s1", "c", "h", 1.0, 1), rec("a1", "s1", "c", "h", -1.0, 1)],
            reg.clone(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Schema { row: 3, .. }));
        let err = SurveyDataset::new(vec![rec("a2", "s1", "c", "h", 1.0, 1)], reg.clone()).unwrap_err();
        assert!(err.to_string().contains("belongs to area"));
        let csv = "area_id,subarea_id,cluster_id,stratum_id,weight,poor\na1,s1,c,h,1.0,1\na1,s1,c,h,x,1\n";
        let err = read_survey_csv(csv.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Schema { row: 3, .. }), "{err}");
        assert!(
            DomainRegistry::from_shares(&[ShareRow { subarea_id: "s".into(), area_id: "a".into(), q: 0.5 }]).is_err()
        );
    }

    #[test]
    fn direct_csv_round_trip() {
        let reg = shares(&[("s1", "a1", 0.25), ("s2", "a1", 0.25), ("s3", "a2", 0.5)]);
        let recs = vec![
            rec("a1", "s1", "c1", "h1", 1.5, 1),
            rec("a1", "s1", "c2", "h1", 2.5, 0),
            rec("a2", "s3", "c3", "h2", 1.0, 1),
        ];
        let data = SurveyDataset::new(recs, reg.clone()).unwrap();
        let d = direct_estimates(&data);
        let mut buf = Vec::new();
        write_direct_csv(&mut buf, &d).unwrap();
        let back = read_direct_csv(buf.as_slice(), &reg).unwrap();
        for (a, b) in d.iter().zip(back.iter()) {
            assert_eq!(a.estimate, b.estimate);
            assert_eq!(a.effective_size, b.effective_size);
            assert_eq!(a.in_sample, b.in_sample);
        }
    }

    fn arb_dataset() -> impl Strategy<Value = (Vec<(usize, usize, f64, u8)>, f64)> {
        (prop::collection::vec((0usize..4, 0usize..6, 0.1f64..50.0, 0u8..2), 1..80), 0.01f64..100.0)
    }

    proptest! {
        #[test]
        fn aggregation_identity_and_rescaling((units, scale) in arb_dataset()) {
            let reg = shares(&[("s0", "a0", 0.25), ("s1", "a0", 0.25), ("s2", "a1", 0.25), ("s3", "a1", 0.25)]);
            let make = |c: f64| -> SurveyDataset {
                let recs = units.iter().map(|&(s, cl, w, y)| {
                    let area = if s < 2 { "a0" } else { "a1" };
                    rec(area, &format!("s{s}"), &format!("c{cl}"), &format!("h{}", cl % 2), w * c, y)
                }).collect();
                SurveyDataset::new(recs, reg.clone()).unwrap()
            };
            let data = make(1.0);
            let scaled = make(scale);
            for a in 0..2 {
                let area_id = format!("a{a}");
                let direct = hajek_area(&data, &area_id).unwrap();
                let (mut num, mut den) = (0.0, 0.0);
                for j in data.registry.subareas_of(a) {
                    if let Some(est) = hajek_subarea(&data, &data.registry.subareas[j]).unwrap() {
                        let wsum = data.subarea_weight_total(j);
                        num += wsum * est;
                        den += wsum;
                    }
                }
                match direct {
                    Some(d) => {
                        prop_assert!((0.0..=1.0).contains(&d));
                        prop_assert!((d - num / den).abs() <= 1e-12);
                        let s = hajek_area(&scaled, &area_id).unwrap().unwrap();
                        prop_assert!((s - d).abs() <= 1e-12);
                    }
                    None => prop_assert_eq!(den, 0.0),
                }
            }
            for e in direct_estimates(&data).iter().filter(|e| e.in_sample) {
                let deff = e.design_effect.unwrap();
                prop_assert!(deff > 0.0);
                if deff >= 1.0 {
                    prop_assert!(e.effective_size.unwrap() <= e.sample_size as f64 + 1e-12);
                }
            }
        }
    }
}
