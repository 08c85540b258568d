use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{compute_metrics, DomainMetrics, Group, GroupSummary, IntervalEstimates};
use super::{draw_sample, generate_population, Population, SimulationConfig};
use crate::benchmark::{project_posterior, BenchmarkProblem, Loss};
use crate::error::{Error, Result};
use crate::models::{Model, ModelData, ModelSpec, Variant};
use crate::posterior::{self, summarize};
use crate::rng;
use crate::survey::{direct_estimates, write_direct_csv, write_survey_csv, Level};

/// Outcome of one model fit in one replicate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub replicate: usize,
    pub model: Variant,
    pub looic_area: Option<f64>,
    pub looic_subarea: Option<f64>,
    pub divergence_rate: f64,
    pub max_rhat: Option<f64>,
    /// Observations with Pareto `k > 0.7`, both levels.
    pub pareto_k_flagged: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedFit {
    pub replicate: usize,
    pub model: Variant,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateTiming {
    pub replicate: usize,
    pub model: Variant,
    pub seconds: f64,
}

/// Everything one replicate contributes to the report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplicateEstimates {
    pub replicate: usize,
    pub fits: Vec<FitRecord>,
    pub failed: Vec<FailedFit>,
    /// `(estimator, level, estimates)`.
    pub estimates: Vec<(String, Level, IntervalEstimates)>,
    pub timing: Vec<ReplicateTiming>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFitSummary {
    pub model: String,
    pub fits: usize,
    pub failed: usize,
    pub mean_looic_area: Option<f64>,
    pub mean_looic_subarea: Option<f64>,
    pub mean_divergence_rate: Option<f64>,
    pub pareto_k_flagged: usize,
}

/// One row of the summary table: LOOIC, MAPE and ARRMSE by group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub estimator: String,
    pub looic: Option<f64>,
    pub mape: GroupValues,
    pub mape_abs: GroupValues,
    pub arrmse: GroupValues,
    pub median_coverage: GroupValues,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupValues {
    pub no_oos: Option<f64>,
    pub oos: Option<f64>,
    pub overall: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub scenario: String,
    pub config: SimulationConfig,
    pub national_rate: f64,
    pub replicates: usize,
    pub area_table: Vec<TableRow>,
    pub subarea_table: Vec<TableRow>,
    pub models: Vec<ModelFitSummary>,
    pub summary: Vec<GroupSummary>,
    pub domains: Vec<DomainMetrics>,
    pub failed: Vec<FailedFit>,
    pub notes: Vec<String>,
    /// Wall-clock seconds per fit; not part of the serialized report.
    #[serde(skip)]
    pub timing: Vec<ReplicateTiming>,
}

impl SimulationReport {
    pub fn group(&self, estimator: &str, level: Level, group: Group) -> Option<&GroupSummary> {
        self.summary.iter().find(|s| s.estimator == estimator && s.level == level && s.group == group)
    }

    pub fn model(&self, variant: Variant) -> Option<&ModelFitSummary> {
        self.models.iter().find(|m| m.model == variant.label())
    }
}

/// Estimator labels a model contributes, by level.
fn estimators(variant: Variant) -> Vec<(String, Level)> {
    match variant {
        Variant::Sms => {
            vec![("S-MS".into(), Level::Area), ("S-MS-Aggr".into(), Level::Area), ("S-MS".into(), Level::Subarea)]
        }
        Variant::Sa => vec![("SA-Aggr".into(), Level::Area), ("SA".into(), Level::Subarea)],
        Variant::Ims => vec![("I-MS".into(), Level::Area), ("I-MS".into(), Level::Subarea)],
    }
}

fn interval_estimates(draws: &[Vec<f64>], n: usize) -> IntervalEstimates {
    let mut out =
        IntervalEstimates { point: Vec::with_capacity(n), lower: Vec::with_capacity(n), upper: Vec::with_capacity(n) };
    for k in 0..n {
        let col: Vec<f64> = draws.iter().map(|r| r[k]).collect();
        let s = summarize(&col);
        out.point.push(s.mean);
        out.lower.push(s.q05);
        out.upper.push(s.q95);
    }
    out
}

fn project(draws: Vec<Vec<f64>>, q: &[f64], t: f64, on: bool) -> Result<Vec<Vec<f64>>> {
    if !on {
        return Ok(draws);
    }
    let problem = BenchmarkProblem::new(q.to_vec(), None, t)?;
    project_posterior(&draws, &problem, Loss::Bregman)
}

fn fit_one(
    population: &Population,
    config: &SimulationConfig,
    replicate: usize,
    variant: Variant,
    direct: &crate::survey::DirectEstimates,
) -> Result<(FitRecord, Vec<(String, Level, IntervalEstimates)>)> {
    let reg = &population.registry;
    let tag = [rng::hash_str("fit"), replicate as u64, rng::hash_str(variant.label())];
    let spec = ModelSpec {
        area_covariates: Population::covariate_names(),
        subarea_covariates: Population::covariate_names(),
        seed: rng::derive_seed(config.seed, &[tag[0], tag[1], tag[2], rng::hash_str("oos")]),
        ..ModelSpec::new(variant)
    };
    let data =
        ModelData::new(reg, direct, &spec, Some(&population.area_covariates), Some(&population.subarea_covariates))?;
    let model = Model::new(spec, data)?;
    let sampler = crate::sampler::SamplerConfig { seed: rng::derive_seed(config.seed, &tag), ..config.sampler.clone() };
    let fit = posterior::fit(model, &sampler)?;
    let divergence_rate = fit.draws.divergence_rate();
    if divergence_rate > config.max_divergence_rate {
        return Err(Error::numerical(format!(
            "divergence rate {divergence_rate:.3} above {}",
            config.max_divergence_rate
        )));
    }
    let max_rhat = fit
        .draws
        .diagnostics()
        .iter()
        .filter_map(|d| d.rhat)
        .fold(None, |m: Option<f64>, r| Some(m.map_or(r, |m| m.max(r))));
    if let Some(r) = max_rhat.filter(|&r| r > config.max_rhat) {
        return Err(Error::numerical(format!("max R-hat {r:.3} above {}", config.max_rhat)));
    }
    let loo_area = fit.loo(Level::Area)?;
    let loo_sub = fit.loo(Level::Subarea)?;
    let record = FitRecord {
        replicate,
        model: variant,
        looic_area: loo_area.as_ref().map(|l| l.looic),
        looic_subarea: loo_sub.as_ref().map(|l| l.looic),
        divergence_rate,
        max_rhat,
        pareto_k_flagged: loo_area.iter().chain(&loo_sub).map(|l| l.flagged.len()).sum(),
    };

    let est = fit.estimands()?;
    let t = population.national_rate;
    let sub = project(est.theta_subarea.clone(), &reg.national_share, t, config.benchmark)?;
    let mut out = Vec::new();
    for (label, level) in estimators(variant) {
        let draws = match (variant, label.as_str(), level) {
            (_, _, Level::Subarea) => sub.clone(),
            (Variant::Sms, "S-MS", Level::Area) => {
                let area = posterior::area_functional_draws(&fit.model, &fit.draws).expect("area level");
                project(area, &reg.area_share, t, config.benchmark)?
            }
            (Variant::Ims, _, Level::Area) => project(est.theta_area.clone(), &reg.area_share, t, config.benchmark)?,
            _ => posterior::aggregate_areas(reg, &sub, &fit.model.data.subarea_estimable)?.0,
        };
        let n = if level == Level::Area { reg.n_areas() } else { reg.n_subareas() };
        out.push((label, level, interval_estimates(&draws, n)));
    }
    Ok((record, out))
}

/// Draw replicate `replicate`, fit every configured model and summarize
/// the (benchmarked) estimates. Failed fits are recorded, not propagated.
pub fn estimate_replicate(
    population: &Population,
    config: &SimulationConfig,
    replicate: usize,
    out_dir: Option<&Path>,
) -> Result<ReplicateEstimates> {
    let sample = draw_sample(population, config, replicate)?;
    let direct = direct_estimates(&sample);
    let mut rep = ReplicateEstimates {
        replicate,
        fits: Vec::new(),
        failed: Vec::new(),
        estimates: Vec::new(),
        timing: Vec::new(),
    };
    for &variant in &config.models {
        let start = Instant::now();
        match fit_one(population, config, replicate, variant, &direct) {
            Ok((record, est)) => {
                rep.fits.push(record);
                rep.estimates.extend(est);
            }
            Err(e) => rep.failed.push(FailedFit { replicate, model: variant, reason: e.to_string() }),
        }
        rep.timing.push(ReplicateTiming { replicate, model: variant, seconds: start.elapsed().as_secs_f64() });
    }
    if let Some(dir) = out_dir {
        let dir = dir.join(format!("replicate_{:04}", replicate + 1));
        fs::create_dir_all(&dir)?;
        write_survey_csv(BufWriter::new(File::create(dir.join("survey.csv"))?), &sample.records)?;
        write_direct_csv(BufWriter::new(File::create(dir.join("direct.csv"))?), &direct)?;
        write_replicate_estimates(BufWriter::new(File::create(dir.join("estimates.csv"))?), population, &rep)?;
        let fits = serde_json::json!({ "fits": rep.fits, "failed": rep.failed });
        let mut f = BufWriter::new(File::create(dir.join("fits.json"))?);
        serde_json::to_writer_pretty(&mut f, &fits)?;
        writeln!(f)?;
    }
    Ok(rep)
}

fn write_replicate_estimates(w: impl Write, population: &Population, rep: &ReplicateEstimates) -> Result<()> {
    let reg = &population.registry;
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["estimator", "level", "domain_id", "truth", "estimate", "q05", "q95"])?;
    for (label, level, est) in &rep.estimates {
        let (ids, truth) = match level {
            Level::Area => (&reg.areas, &population.theta_area),
            Level::Subarea => (&reg.subareas, &population.theta_subarea),
        };
        for k in 0..ids.len() {
            w.write_record([
                label.clone(),
                level.to_string(),
                ids[k].clone(),
                truth[k].to_string(),
                est.point[k].to_string(),
                est.lower[k].to_string(),
                est.upper[k].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn mean_of(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Run the whole study. Replicates are independent and run in parallel;
/// when `out_dir` is given, per-replicate artifacts are written below it.
pub fn run_study(config: &SimulationConfig, out_dir: Option<&Path>) -> Result<SimulationReport> {
    config.validate()?;
    let population = generate_population(config)?;
    let reps: Vec<ReplicateEstimates> = (0..config.replicates)
        .into_par_iter()
        .map(|b| estimate_replicate(&population, config, b, out_dir))
        .collect::<Result<_>>()?;
    aggregate(config, &population, reps)
}

fn aggregate(
    config: &SimulationConfig,
    population: &Population,
    reps: Vec<ReplicateEstimates>,
) -> Result<SimulationReport> {
    let reg = &population.registry;
    let mut summary = Vec::new();
    let mut domains = Vec::new();
    let mut notes = Vec::new();
    let mut labels: Vec<(String, Level)> = Vec::new();
    for &v in &config.models {
        labels.extend(estimators(v));
    }
    for (label, level) in &labels {
        let est: Vec<IntervalEstimates> = reps
            .iter()
            .flat_map(|r| r.estimates.iter().filter(|(l, lv, _)| l == label && lv == level).map(|(_, _, e)| e.clone()))
            .collect();
        let (ids, truths, oos) = match level {
            Level::Area => (&reg.areas, &population.theta_area, &population.oos_area),
            Level::Subarea => (&reg.subareas, &population.theta_subarea, &population.oos_subarea),
        };
        if est.is_empty() {
            notes.push(format!("{label} ({level}): no successful replicates"));
            continue;
        }
        let (d, s, n) = compute_metrics(label, *level, ids, truths, oos, &est)?;
        domains.extend(d);
        summary.extend(s);
        notes.extend(n);
    }
    let fits: Vec<&FitRecord> = reps.iter().flat_map(|r| &r.fits).collect();
    let failed: Vec<FailedFit> = reps.iter().flat_map(|r| r.failed.iter().cloned()).collect();
    let models: Vec<ModelFitSummary> = config
        .models
        .iter()
        .map(|&v| {
            let mine: Vec<&&FitRecord> = fits.iter().filter(|f| f.model == v).collect();
            ModelFitSummary {
                model: v.label().to_owned(),
                fits: mine.len(),
                failed: failed.iter().filter(|f| f.model == v).count(),
                mean_looic_area: mean_of(mine.iter().filter_map(|f| f.looic_area)),
                mean_looic_subarea: mean_of(mine.iter().filter_map(|f| f.looic_subarea)),
                mean_divergence_rate: mean_of(mine.iter().map(|f| f.divergence_rate)),
                pareto_k_flagged: mine.iter().map(|f| f.pareto_k_flagged).sum(),
            }
        })
        .collect();
    let table = |level: Level| -> Vec<TableRow> {
        labels
            .iter()
            .filter(|(_, lv)| *lv == level)
            .map(|(label, _)| {
                let pick = |f: &dyn Fn(&GroupSummary) -> Option<f64>| GroupValues {
                    no_oos: summary
                        .iter()
                        .find(|s| &s.estimator == label && s.level == level && s.group == Group::NoOos)
                        .and_then(f),
                    oos: summary
                        .iter()
                        .find(|s| &s.estimator == label && s.level == level && s.group == Group::Oos)
                        .and_then(f),
                    overall: summary
                        .iter()
                        .find(|s| &s.estimator == label && s.level == level && s.group == Group::Overall)
                        .and_then(f),
                };
                // LOOIC belongs to the model, reported on the rows of its own predictor
                let looic = models.iter().find(|m| &m.model == label).and_then(|m| match level {
                    Level::Area => m.mean_looic_area,
                    Level::Subarea => m.mean_looic_subarea,
                });
                TableRow {
                    estimator: label.clone(),
                    looic,
                    mape: pick(&|s| s.mape),
                    mape_abs: pick(&|s| s.mape_abs),
                    arrmse: pick(&|s| s.arrmse),
                    median_coverage: pick(&|s| s.median_coverage),
                }
            })
            .collect()
    };
    Ok(SimulationReport {
        scenario: config.scenario.clone(),
        config: config.clone(),
        national_rate: population.national_rate,
        replicates: config.replicates,
        area_table: table(Level::Area),
        subarea_table: table(Level::Subarea),
        models,
        summary,
        domains,
        failed,
        notes,
        timing: reps.iter().flat_map(|r| r.timing.iter().cloned()).collect(),
    })
}

pub const REPORT_HEADER: [&str; 9] =
    ["estimator", "level", "domain_id", "oos", "truth", "bias", "rmse", "coverage", "replicates"];

/// Per-domain metrics, one row per estimator and domain.
pub fn write_report_csv(writer: impl Write, report: &SimulationReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(REPORT_HEADER)?;
    for d in &report.domains {
        w.write_record([
            d.estimator.clone(),
            d.level.to_string(),
            d.domain_id.clone(),
            d.oos.to_string(),
            d.truth.to_string(),
            d.bias.to_string(),
            d.rmse.to_string(),
            d.coverage.to_string(),
            d.replicates.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
