//! From parameter draws to poverty-rate draws and their summaries.
//!
//! In-sample sub-areas use the Extended Beta population functional of
//! `(mu, lambda_s, m)`. Out-of-sample sub-areas use `mu` with a fresh
//! sub-area effect drawn from its prior for every posterior draw. Areas are
//! share-weighted aggregates of their sub-areas, except under the
//! independent model, where the area-level functional is used.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eb;
use crate::error::{Error, Result};
use crate::models::{Derived, Model};
use crate::rng;
use crate::sampler::{self, LooResult, PosteriorDraws, SamplerConfig};
use crate::survey::{DomainRegistry, Level};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    InSampleFunctional,
    OosFunctional,
    Aggregated,
    /// Projected onto a national benchmark.
    Benchmarked,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::InSampleFunctional => "in_sample_functional",
            Provenance::OosFunctional => "oos_functional",
            Provenance::Aggregated => "aggregated",
            Provenance::Benchmarked => "benchmarked",
        }
    }
}

/// A sampled model together with its draws.
#[derive(Clone, Debug)]
pub struct Fit {
    pub model: Model,
    pub config: SamplerConfig,
    /// Unconstrained draws.
    pub draws: PosteriorDraws,
}

pub fn fit(model: Model, config: &SamplerConfig) -> Result<Fit> {
    let draws = sampler::sample(&model, model.parameter_names(), config)?;
    Ok(Fit { model, config: config.clone(), draws })
}

impl Fit {
    /// Draws of the constrained parameters (intercepts, coefficients,
    /// effects, scales and correlations).
    pub fn constrained_draws(&self) -> PosteriorDraws {
        self.draws.map(self.model.constrained_names(), |x| self.model.constrained_values(x))
    }

    /// `[draw][observation]` log-likelihoods of one level.
    pub fn loglik(&self, level: Level) -> Vec<Vec<f64>> {
        let rows: Vec<&[f64]> = self.draws.iter().collect();
        rows.par_iter()
            .map(|x| {
                let (a, s) = self.model.pointwise_loglik(x);
                match level {
                    Level::Area => a,
                    Level::Subarea => s,
                }
            })
            .collect()
    }

    /// PSIS-LOO at one level; `None` when the level has no observations.
    pub fn loo(&self, level: Level) -> Result<Option<LooResult>> {
        let (na, ns) = self.model.n_observations();
        let n = if level == Level::Area { na } else { ns };
        if n == 0 {
            return Ok(None);
        }
        sampler::looic(&self.loglik(level)).map(Some)
    }

    pub fn estimands(&self) -> Result<EstimandDraws> {
        estimand_draws(&self.model, &self.draws, self.model.spec.seed)
    }
}

/// Poverty-rate draws, `[draw][domain]`. Non-estimable sub-areas hold NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimandDraws {
    pub subarea_ids: Vec<String>,
    pub area_ids: Vec<String>,
    pub theta_subarea: Vec<Vec<f64>>,
    pub theta_area: Vec<Vec<f64>>,
    pub subarea_provenance: Vec<Option<Provenance>>,
    pub area_provenance: Vec<Option<Provenance>>,
    pub warnings: Vec<String>,
}

impl EstimandDraws {
    pub fn n_draws(&self) -> usize {
        self.theta_subarea.len()
    }

    pub fn column(&self, level: Level, k: usize) -> Vec<f64> {
        let rows = match level {
            Level::Area => &self.theta_area,
            Level::Subarea => &self.theta_subarea,
        };
        rows.iter().map(|r| r[k]).collect()
    }

    /// Summary rows for every estimable domain, areas first.
    pub fn summaries(&self) -> Vec<EstimateRow> {
        let mut out = Vec::new();
        for (level, ids, prov) in [
            (Level::Area, &self.area_ids, &self.area_provenance),
            (Level::Subarea, &self.subarea_ids, &self.subarea_provenance),
        ] {
            for (k, id) in ids.iter().enumerate() {
                let Some(p) = prov[k] else { continue };
                let s = summarize(&self.column(level, k));
                out.push(EstimateRow { domain_id: id.clone(), level, summary: s, provenance: p });
            }
        }
        out
    }
}

/// Replace the area columns by share-weighted sums of sub-area columns,
/// renormalizing over estimable sub-areas.
pub fn aggregate_areas(
    reg: &DomainRegistry,
    theta_subarea: &[Vec<f64>],
    estimable: &[bool],
) -> Result<(Vec<Vec<f64>>, Vec<Option<Provenance>>, Vec<String>)> {
    let mut warnings = Vec::new();
    let mut weights: Vec<Vec<(usize, f64)>> = Vec::with_capacity(reg.n_areas());
    let mut prov = Vec::with_capacity(reg.n_areas());
    for a in 0..reg.n_areas() {
        let members = reg.subareas_of(a);
        let total: f64 = members.iter().map(|&j| reg.subarea_share[j]).sum();
        if (total - 1.0).abs() > crate::survey::SHARE_TOLERANCE {
            return Err(Error::input(format!("shares of area `{}` sum to {total}", reg.areas[a])));
        }
        let kept: Vec<usize> = members.iter().copied().filter(|&j| estimable[j]).collect();
        let mass: f64 = kept.iter().map(|&j| reg.subarea_share[j]).sum();
        if kept.is_empty() {
            warnings.push(format!("area `{}` has no estimable sub-areas and is not estimated", reg.areas[a]));
            weights.push(Vec::new());
            prov.push(None);
            continue;
        }
        if kept.len() < members.len() {
            warnings.push(format!(
                "area `{}`: {} non-estimable sub-area(s) excluded; shares renormalized over {:.4} of the area",
                reg.areas[a],
                members.len() - kept.len(),
                mass
            ));
        }
        weights.push(kept.iter().map(|&j| (j, reg.subarea_share[j] / mass)).collect());
        prov.push(Some(Provenance::Aggregated));
    }
    let rows = theta_subarea
        .iter()
        .map(|row| {
            weights
                .iter()
                .map(|w| if w.is_empty() { f64::NAN } else { w.iter().map(|&(j, s)| s * row[j]).sum() })
                .collect()
        })
        .collect();
    Ok((rows, prov, warnings))
}

fn area_functional_row(model: &Model, d: &Derived) -> Vec<f64> {
    let lambda = d.lambda_a.unwrap_or(1.0);
    model
        .data
        .area_obs
        .iter()
        .zip(&d.mu_area)
        .map(|(o, &mu)| match o {
            Some(o) => eb::theta_unchecked(mu, lambda, o.m),
            None => mu,
        })
        .collect()
}

/// Area proportions from the area-level predictor, `[draw][area]`; `None`
/// for variants without an area level.
pub fn area_functional_draws(model: &Model, draws: &PosteriorDraws) -> Option<Vec<Vec<f64>>> {
    if !model.variant().has_area_level() {
        return None;
    }
    let rows: Vec<&[f64]> = draws.iter().collect();
    Some(rows.par_iter().map(|x| area_functional_row(model, &model.derive(x))).collect())
}

/// Poverty-rate draws from unconstrained parameter draws. Fresh effects of
/// out-of-sample sub-areas come from per-domain streams of `seed`.
pub fn estimand_draws(model: &Model, draws: &PosteriorDraws, seed: u64) -> Result<EstimandDraws> {
    let data = &model.data;
    let reg = &data.registry;
    let m = reg.n_subareas();
    let rows: Vec<&[f64]> = draws.iter().collect();
    let derived: Vec<_> = rows.par_iter().map(|x| model.derive(x)).collect();

    // per sub-area columns, parallel by domain
    let columns: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|j| {
            if !data.subarea_estimable[j] {
                return vec![f64::NAN; derived.len()];
            }
            match data.subarea_obs[j] {
                Some(o) => derived.iter().map(|d| eb::theta_unchecked(d.mu_subarea[j], d.lambda_s, o.m)).collect(),
                None => {
                    let mut r = rng::stream(seed, &[rng::hash_str("oos"), rng::hash_str(&reg.subareas[j])]);
                    derived
                        .iter()
                        .map(|d| {
                            let v = model.draw_subarea_effect(&mut r, d.sigma_v);
                            crate::models::logistic(d.eta_subarea_fixed[j] + v)
                        })
                        .collect()
                }
            }
        })
        .collect();
    let theta_subarea: Vec<Vec<f64>> = (0..derived.len()).map(|i| columns.iter().map(|c| c[i]).collect()).collect();
    let subarea_provenance: Vec<Option<Provenance>> = (0..m)
        .map(|j| match (data.subarea_estimable[j], data.subarea_obs[j].is_some()) {
            (false, _) => None,
            (true, true) => Some(Provenance::InSampleFunctional),
            (true, false) => Some(Provenance::OosFunctional),
        })
        .collect();
    let mut warnings: Vec<String> = (0..m)
        .filter(|&j| !data.subarea_estimable[j])
        .map(|j| format!("sub-area `{}` is out of sample without covariates and is not estimated", reg.subareas[j]))
        .collect();

    let (theta_area, area_provenance) = if model.variant().aggregates() {
        let (rows, prov, w) = aggregate_areas(reg, &theta_subarea, &data.subarea_estimable)?;
        warnings.extend(w);
        (rows, prov)
    } else {
        let rows = derived.iter().map(|d| area_functional_row(model, d)).collect();
        let prov = data
            .area_obs
            .iter()
            .map(|o| Some(if o.is_some() { Provenance::InSampleFunctional } else { Provenance::OosFunctional }))
            .collect();
        (rows, prov)
    };
    Ok(EstimandDraws {
        subarea_ids: reg.subareas.clone(),
        area_ids: reg.areas.clone(),
        theta_subarea,
        theta_area,
        subarea_provenance,
        area_provenance,
        warnings,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
}

/// Quantile by linear interpolation between order statistics (type 7):
/// `h = (n - 1) p`, `x[floor h] + (h - floor h)(x[floor h + 1] - x[floor h])`.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(draws: &[f64]) -> Summary {
    assert!(!draws.is_empty(), "summary of an empty draw set");
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let sd =
        if draws.len() > 1 { (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    let mut s = draws.to_vec();
    s.sort_by(f64::total_cmp);
    Summary { mean, sd, q05: quantile(&s, 0.05), q50: quantile(&s, 0.5), q95: quantile(&s, 0.95) }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimateRow {
    pub domain_id: String,
    pub level: Level,
    pub summary: Summary,
    pub provenance: Provenance,
}

pub const ESTIMATES_HEADER: [&str; 8] = ["domain_id", "level", "estimate", "sd", "q05", "q50", "q95", "provenance"];

pub fn write_estimates_csv(writer: impl Write, rows: &[EstimateRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(ESTIMATES_HEADER)?;
    for r in rows {
        let s = &r.summary;
        w.write_record([
            r.domain_id.clone(),
            r.level.to_string(),
            s.mean.to_string(),
            s.sd.to_string(),
            s.q05.to_string(),
            s.q50.to_string(),
            s.q95.to_string(),
            r.provenance.as_str().to_owned(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct EstimateCsvRow {
    domain_id: String,
    level: String,
    estimate: f64,
    sd: f64,
    q05: f64,
    q50: f64,
    q95: f64,
    provenance: String,
}

/// Read a table written by [`write_estimates_csv`].
pub fn read_estimates_csv(reader: impl Read) -> Result<Vec<EstimateRow>> {
    let mut r = csv::Reader::from_reader(reader);
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != ESTIMATES_HEADER {
        return Err(Error::Schema {
            file: "estimates".into(),
            row: 1,
            message: format!("expected header {}", ESTIMATES_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for (k, rec) in r.deserialize::<EstimateCsvRow>().enumerate() {
        let schema = |message: String| Error::Schema { file: "estimates".into(), row: k + 2, message };
        let row = rec.map_err(|e| schema(e.to_string()))?;
        let provenance = match row.provenance.as_str() {
            "in_sample_functional" => Provenance::InSampleFunctional,
            "oos_functional" => Provenance::OosFunctional,
            "aggregated" => Provenance::Aggregated,
            "benchmarked" => Provenance::Benchmarked,
            other => return Err(schema(format!("unknown provenance `{other}`"))),
        };
        out.push(EstimateRow {
            domain_id: row.domain_id,
            level: row.level.parse().map_err(|e: Error| schema(e.to_string()))?,
            summary: Summary { mean: row.estimate, sd: row.sd, q05: row.q05, q50: row.q50, q95: row.q95 },
            provenance,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{CovariateTable, ModelData, ModelSpec, Variant};
    use crate::survey::{DirectEstimate, DirectEstimates, DomainRegistry, ShareRow};
    use rand::{Rng, SeedableRng};

    fn registry() -> DomainRegistry {
        let rows = vec![
            ShareRow { subarea_id: "s1".into(), area_id: "a".into(), q: 0.2 },
            ShareRow { subarea_id: "s2".into(), area_id: "a".into(), q: 0.3 },
            ShareRow { subarea_id: "s3".into(), area_id: "b".into(), q: 0.1 },
            ShareRow { subarea_id: "s4".into(), area_id: "b".into(), q: 0.4 },
        ];
        DomainRegistry::from_shares(&rows).unwrap()
    }

    fn direct(reg: &DomainRegistry) -> DirectEstimates {
        let mk = |id: &String, level, y: Option<f64>| match y {
            Some(y) => DirectEstimate {
                estimate: Some(y),
                sample_size: 40,
                effective_size: Some(20.0),
                design_effect: Some(2.0),
                censor_exponent: 40,
                in_sample: true,
                ..DirectEstimate::out_of_sample(id.clone(), level)
            },
            None => DirectEstimate::out_of_sample(id.clone(), level),
        };
        DirectEstimates {
            areas: reg.areas.iter().map(|id| mk(id, Level::Area, Some(0.3))).collect(),
            subareas: reg
                .subareas
                .iter()
                .zip([Some(0.25), Some(0.3), None, Some(0.35)])
                .map(|(id, y)| mk(id, Level::Subarea, y))
                .collect(),
        }
    }

    fn model(variant: Variant) -> Model {
        let reg = registry();
        let mut spec = ModelSpec::new(variant);
        spec.subarea_covariates = vec!["x".into()];
        let table = CovariateTable {
            columns: vec!["x".into()],
            rows: reg.subareas.iter().enumerate().map(|(j, id)| (id.clone(), vec![Some(j as f64)])).collect(),
        };
        Model::new(spec.clone(), ModelData::new(&reg, &direct(&reg), &spec, None, Some(&table)).unwrap()).unwrap()
    }

    fn fake_draws(model: &Model, n: usize, seed: u64) -> PosteriorDraws {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        PosteriorDraws {
            names: model.parameter_names(),
            chains: 1,
            kept: n,
            values: (0..n * model.dim()).map(|_| rng.random_range(-1.0..1.0)).collect(),
            stats: Vec::new(),
        }
    }

    #[test]
    fn draw_replay_oracle() {
        for variant in Variant::ALL {
            let m = model(variant);
            let draws = fake_draws(&m, 30, 1);
            let est = estimand_draws(&m, &draws, 5).unwrap();
            for (i, x) in draws.iter().enumerate() {
                let d = m.derive(x);
                for j in [0, 1, 3] {
                    let o = m.data.subarea_obs[j].unwrap();
                    let want = eb::theta_functional(d.mu_subarea[j], d.lambda_s, o.m).unwrap();
                    assert_eq!(est.theta_subarea[i][j], want);
                }
                let th = &est.theta_subarea[i];
                if variant.aggregates() {
                    assert!((est.theta_area[i][0] - (0.4 * th[0] + 0.6 * th[1])).abs() < 1e-15);
                    assert!((est.theta_area[i][1] - (0.2 * th[2] + 0.8 * th[3])).abs() < 1e-15);
                } else {
                    let want = eb::theta_functional(d.mu_area[1], d.lambda_a.unwrap(), 40).unwrap();
                    assert_eq!(est.theta_area[i][1], want);
                }
                assert!(est.theta_subarea[i].iter().chain(&est.theta_area[i]).all(|&t| t > 0.0 && t < 1.0));
            }
            assert_eq!(est.subarea_provenance[2], Some(Provenance::OosFunctional));
        }
    }

    #[test]
    fn oos_draws_use_fresh_prior_effects() {
        let m = model(Variant::Sms);
        let draws = fake_draws(&m, 2000, 2);
        let est = estimand_draws(&m, &draws, 5).unwrap();
        // replay the per-domain stream
        let mut r = rng::stream(5, &[rng::hash_str("oos"), rng::hash_str("s3")]);
        for (i, x) in draws.iter().enumerate() {
            let d = m.derive(x);
            let v = m.draw_subarea_effect(&mut r, d.sigma_v);
            let want = crate::models::logistic(d.eta_subarea_fixed[2] + v);
            assert_eq!(est.theta_subarea[i][2], want);
            // the sampled parameter v for s3 is not used
            assert!((d.mu_subarea[2] - est.theta_subarea[i][2]).abs() > 0.0);
        }
        let again = estimand_draws(&m, &draws, 5).unwrap();
        assert_eq!(est, again);
    }

    #[test]
    fn lambda_one_gives_mu() {
        let m = model(Variant::Sa);
        let mut draws = fake_draws(&m, 5, 3);
        let k = m.dim() - 1;
        let p = m.dim();
        for i in 0..5 {
            draws.values[i * p + k] = 60.0;
        }
        let est = estimand_draws(&m, &draws, 0).unwrap();
        for (i, x) in draws.iter().enumerate() {
            let d = m.derive(x);
            assert_eq!(d.lambda_s, 1.0);
            for j in [0, 1, 3] {
                assert!((est.theta_subarea[i][j] - d.mu_subarea[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn non_estimable_subareas_are_renormalized() {
        let reg = registry();
        let mut spec = ModelSpec::new(Variant::Sms);
        spec.subarea_covariates = vec!["x".into()];
        let table = CovariateTable {
            columns: vec!["x".into()],
            rows: vec![("s1".into(), vec![Some(0.0)]), ("s2".into(), vec![Some(1.0)]), ("s4".into(), vec![Some(2.0)])],
        };
        let m =
            Model::new(spec.clone(), ModelData::new(&reg, &direct(&reg), &spec, None, Some(&table)).unwrap()).unwrap();
        let draws = fake_draws(&m, 4, 4);
        let est = estimand_draws(&m, &draws, 0).unwrap();
        assert!(est.theta_subarea.iter().all(|r| r[2].is_nan()));
        for r in 0..4 {
            assert_eq!(est.theta_area[r][1], est.theta_subarea[r][3]);
        }
        assert_eq!(est.warnings.len(), 2, "{:?}", est.warnings);
        assert!(est.summaries().iter().all(|s| s.domain_id != "s3"));
    }

    #[test]
    fn aggregation_arithmetic() {
        let m = model(Variant::Sms);
        let sub = vec![vec![0.1, 0.3, 0.5, 0.5]];
        let (rows, _, _) = aggregate_areas(&m.data.registry, &sub, &[true; 4]).unwrap();
        assert!((rows[0][0] - (0.4 * 0.1 + 0.6 * 0.3)).abs() < 1e-15);
        assert_eq!(rows[0][1], 0.5);
    }

    #[test]
    fn summary_conventions() {
        let s = summarize(&[0.3; 7]);
        assert_eq!((s.mean, s.sd, s.q05, s.q95), (0.3, 0.0, 0.3, 0.3));
        // 11 sorted values 0..=10: h = 0.5 for p = 0.05, 9.5 for p = 0.95
        let v: Vec<f64> = (0..=10).rev().map(f64::from).collect();
        let s = summarize(&v);
        assert_eq!((s.q05, s.q50, s.q95), (0.5, 5.0, 9.5));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let u: Vec<f64> = (0..100_000).map(|_| rng.random()).collect();
        let s = summarize(&u);
        assert!((s.mean - 0.5).abs() < 0.005 && (s.q05 - 0.05).abs() < 0.005 && (s.q95 - 0.95).abs() < 0.005);
        assert_eq!(summarize(&u), s);
    }

    #[test]
    fn estimates_csv_layout() {
        let rows = vec![EstimateRow {
            domain_id: "a".into(),
            level: Level::Area,
            summary: summarize(&[0.25, 0.75]),
            provenance: Provenance::Aggregated,
        }];
        let mut buf = Vec::new();
        write_estimates_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "domain_id,level,estimate,sd,q05,q50,q95,provenance");
        assert!(text.lines().nth(1).unwrap().starts_with("a,area,0.5,"));
        assert!(text.ends_with("aggregated\n"));
        assert_eq!(read_estimates_csv(text.as_bytes()).unwrap(), rows);
        assert!(read_estimates_csv("domain_id,level\n".as_bytes()).is_err());
    }
}
