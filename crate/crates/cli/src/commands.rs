//! Implementations of the subcommands. Each writes its artifacts and a
//! manifest into a fresh or previously managed output directory.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use multiscale_sae::benchmark::{self, BenchmarkProblem, Loss};
use multiscale_sae::models::{CovariateTable, Model, ModelData, ModelSpec, Variant};
use multiscale_sae::posterior::{
    self, read_estimates_csv, write_estimates_csv, EstimandDraws, EstimateRow, Provenance,
};
use multiscale_sae::sampler::{LooResult, PosteriorDraws, SamplerConfig};
use multiscale_sae::simulate::{self, SimulationConfig};
use multiscale_sae::survey::{
    direct_estimates, read_direct_csv, read_shares_csv, read_survey_csv, write_direct_csv, DirectEstimates,
    DomainRegistry, Level, SurveyDataset,
};
use multiscale_sae::Error;

use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::{BenchmarkArgs, CliError, CliResult, DirectArgs, FitArgs, ReportArgs, SimulateArgs, RHAT_GATE};

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::Usage(format!("cannot open {}: {e}", path.display())))
}

fn create(dir: &Path, name: &str) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json<T: Serialize + ?Sized>(dir: &Path, name: &str, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(dir.join(name), text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    serde_json::from_reader(open(path)?).map_err(|e| CliError::Core(Error::input(format!("{}: {e}", path.display()))))
}

/// Create `dir`, or clear the artifacts of an earlier run recorded in its
/// manifest. A non-empty directory without a manifest is refused.
pub fn prepare_out(dir: &Path) -> CliResult<()> {
    if !dir.exists() {
        fs::create_dir_all(dir)?;
        return Ok(());
    }
    if dir.join(MANIFEST_FILE).exists() {
        let old = RunManifest::read(dir)?;
        for a in &old.artifacts {
            let p = dir.join(&a.path);
            if p.is_file() {
                fs::remove_file(&p)?;
            }
        }
        fs::remove_file(dir.join(MANIFEST_FILE))?;
        remove_empty_dirs(dir)?;
        return Ok(());
    }
    if fs::read_dir(dir)?.next().is_some() {
        return Err(CliError::Usage(format!(
            "output directory {} is not empty and has no {MANIFEST_FILE}",
            dir.display()
        )));
    }
    Ok(())
}

fn remove_empty_dirs(dir: &Path) -> CliResult<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            remove_empty_dirs(&p)?;
            if fs::read_dir(&p)?.next().is_none() {
                fs::remove_dir(&p)?;
            }
        }
    }
    Ok(())
}

fn load_registry(shares: &Path) -> CliResult<DomainRegistry> {
    Ok(DomainRegistry::from_shares(&read_shares_csv(open(shares)?)?)?)
}

pub fn cmd_direct(args: &DirectArgs) -> CliResult<()> {
    let registry = load_registry(&args.shares)?;
    let records = read_survey_csv(open(&args.survey)?)?;
    let data = SurveyDataset::new(records, registry)?;
    let estimates = direct_estimates(&data);
    prepare_out(&args.out)?;
    let manifest = RunManifest::new("direct", json!({}), None, &[&args.survey, &args.shares])?;
    let mut w = create(&args.out, "direct.csv")?;
    write_direct_csv(&mut w, &estimates)?;
    w.flush()?;
    manifest.finish(&args.out)?;
    Ok(())
}

fn read_covariates(path: Option<&PathBuf>, name: &str) -> CliResult<Option<CovariateTable>> {
    path.map(|p| CovariateTable::read_csv(open(p)?, name).map_err(CliError::from)).transpose()
}

fn model_spec(args: &FitArgs, area: Option<&CovariateTable>, sub: Option<&CovariateTable>) -> CliResult<ModelSpec> {
    let mut spec = match &args.model {
        Some(p) => read_json::<ModelSpec>(p)?,
        None => {
            let mut spec = ModelSpec::new(args.variant.unwrap_or(Variant::Sms));
            if spec.variant.has_area_level() {
                spec.area_covariates = area.map(|t| t.columns.clone()).unwrap_or_default();
            }
            spec.subarea_covariates = sub.map(|t| t.columns.clone()).unwrap_or_default();
            spec
        }
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    Ok(spec)
}

fn sampler_config(args: &FitArgs) -> CliResult<SamplerConfig> {
    let mut cfg = match &args.sampler {
        Some(p) => read_json::<SamplerConfig>(p)?,
        None => SamplerConfig::default(),
    };
    if let Some(c) = args.chains {
        cfg.chains = c;
    }
    if let Some(i) = args.iterations {
        cfg.iterations = i;
    }
    if let Some(w) = args.warmup {
        cfg.warmup = w;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct LooSummary {
    looic: f64,
    looic_se: f64,
    elpd_loo: f64,
    elpd_se: f64,
    observations: usize,
    /// Domains whose Pareto k exceeds 0.7.
    flagged: Vec<String>,
}

fn loo_summary(loo: Option<LooResult>, ids: &[String], obs: &[bool]) -> Option<LooSummary> {
    let loo = loo?;
    let observed: Vec<&String> = ids.iter().zip(obs).filter(|(_, o)| **o).map(|(id, _)| id).collect();
    Some(LooSummary {
        looic: loo.looic,
        looic_se: loo.looic_se,
        elpd_loo: loo.elpd_loo,
        elpd_se: loo.elpd_se,
        observations: loo.pointwise_elpd.len(),
        flagged: loo.flagged.iter().map(|&i| observed[i].clone()).collect(),
    })
}

#[derive(Serialize)]
struct FitSummary {
    variant: &'static str,
    chains: usize,
    kept_per_chain: usize,
    divergences: usize,
    divergence_rate: f64,
    max_rhat: Option<f64>,
    max_rhat_parameter: Option<String>,
    min_ess_bulk: Option<f64>,
    gate_passed: bool,
    forced: bool,
    step_sizes: Vec<f64>,
    mean_accept: Vec<f64>,
    warnings: Vec<String>,
}

fn draws_table(names: &[String], rows: &[Vec<f64>], chains: usize, kept: usize) -> PosteriorDraws {
    PosteriorDraws {
        names: names.to_vec(),
        chains,
        kept,
        values: rows.iter().flatten().copied().collect(),
        stats: Vec::new(),
    }
}

fn write_draws(dir: &Path, name: &str, draws: &PosteriorDraws) -> CliResult<()> {
    let mut w = create(dir, name)?;
    draws.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn cmd_fit(args: &FitArgs) -> CliResult<()> {
    let registry = load_registry(&args.shares)?;
    let direct: DirectEstimates = read_direct_csv(open(&args.direct)?, &registry)?;
    let area = read_covariates(args.area_covariates.as_ref(), "area_covariates")?;
    let sub = read_covariates(args.subarea_covariates.as_ref(), "subarea_covariates")?;
    let spec = model_spec(args, area.as_ref(), sub.as_ref())?;
    let config = sampler_config(args)?;
    let data = ModelData::new(&registry, &direct, &spec, area.as_ref(), sub.as_ref())?;
    let model = Model::new(spec.clone(), data)?;

    let mut inputs: Vec<&Path> = vec![&args.direct, &args.shares];
    inputs.extend(args.area_covariates.as_deref());
    inputs.extend(args.subarea_covariates.as_deref());
    inputs.extend(args.model.as_deref());
    inputs.extend(args.sampler.as_deref());
    let manifest = RunManifest::new("fit", json!({ "model": spec, "sampler": config }), Some(config.seed), &inputs)?;

    let fit = posterior::fit(model, &config)?;
    prepare_out(&args.out)?;
    write_draws(&args.out, "draws.csv", &fit.draws)?;
    let constrained = fit.constrained_draws();
    write_draws(&args.out, "parameters.csv", &constrained)?;
    let diagnostics = constrained.diagnostics();
    {
        let mut w = csv::Writer::from_writer(create(&args.out, "diagnostics.csv")?);
        w.write_record(["parameter", "mean", "sd", "rhat", "ess_bulk", "ess_tail", "note"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for d in &diagnostics {
            w.write_record([
                d.name.clone(),
                d.mean.to_string(),
                d.sd.to_string(),
                opt(d.rhat),
                opt(d.ess_bulk),
                opt(d.ess_tail),
                d.note.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
    }

    let data = &fit.model.data;
    let area_obs: Vec<bool> = data.area_obs.iter().map(Option::is_some).collect();
    let sub_obs: Vec<bool> = data.subarea_obs.iter().map(Option::is_some).collect();
    let looic = json!({
        "area": loo_summary(fit.loo(Level::Area)?, &registry.areas, &area_obs),
        "subarea": loo_summary(fit.loo(Level::Subarea)?, &registry.subareas, &sub_obs),
    });
    write_json(&args.out, "looic.json", &looic)?;

    let (max_rhat, max_rhat_parameter) = diagnostics.iter().filter_map(|d| d.rhat.map(|r| (r, d.name.clone()))).fold(
        (None, None),
        |(best, name), (r, n)| match best {
            Some(b) if b >= r => (Some(b), name),
            _ => (Some(r), Some(n)),
        },
    );
    let min_ess_bulk = diagnostics.iter().filter_map(|d| d.ess_bulk).reduce(f64::min);
    let gate_passed = max_rhat.is_none_or(|r| r <= RHAT_GATE);
    let mut summary = FitSummary {
        variant: fit.model.variant().label(),
        chains: fit.draws.chains,
        kept_per_chain: fit.draws.kept,
        divergences: fit.draws.divergences(),
        divergence_rate: fit.draws.divergence_rate(),
        max_rhat,
        max_rhat_parameter,
        min_ess_bulk,
        gate_passed,
        forced: args.force && !gate_passed,
        step_sizes: fit.draws.stats.iter().map(|s| s.step_size).collect(),
        mean_accept: fit.draws.stats.iter().map(|s| s.mean_accept).collect(),
        warnings: Vec::new(),
    };
    if !gate_passed && !args.force {
        write_json(&args.out, "fit.json", &summary)?;
        manifest.finish(&args.out)?;
        return Err(CliError::Gate(format!(
            "max R-hat {:.4} exceeds {RHAT_GATE}; rerun with more iterations or --force",
            max_rhat.unwrap_or(f64::NAN)
        )));
    }

    let estimands = fit.estimands()?;
    summary.warnings = estimands.warnings.clone();
    write_json(&args.out, "fit.json", &summary)?;
    let mut w = create(&args.out, "estimates.csv")?;
    write_estimates_csv(&mut w, &estimands.summaries())?;
    w.flush()?;
    let (chains, kept) = (fit.draws.chains, fit.draws.kept);
    write_draws(
        &args.out,
        "theta_subarea_draws.csv",
        &draws_table(&estimands.subarea_ids, &estimands.theta_subarea, chains, kept),
    )?;
    write_draws(
        &args.out,
        "theta_area_draws.csv",
        &draws_table(&estimands.area_ids, &estimands.theta_area, chains, kept),
    )?;
    manifest.finish(&args.out)?;
    Ok(())
}

fn read_psi(path: &Path, registry: &DomainRegistry) -> CliResult<Vec<f64>> {
    #[derive(Deserialize)]
    struct Row {
        subarea_id: String,
        psi: f64,
    }
    let mut psi = vec![f64::NAN; registry.n_subareas()];
    let mut r = csv::Reader::from_reader(open(path)?);
    for (k, rec) in r.deserialize::<Row>().enumerate() {
        let schema = |message: String| Error::Schema { file: "psi".into(), row: k + 2, message };
        let row = rec.map_err(|e| schema(e.to_string()))?;
        let j = registry
            .subarea_idx(&row.subarea_id)
            .ok_or_else(|| schema(format!("unknown sub-area `{}`", row.subarea_id)))?;
        psi[j] = row.psi;
    }
    let missing: Vec<&str> =
        (0..psi.len()).filter(|&j| psi[j].is_nan()).map(|j| registry.subareas[j].as_str()).collect();
    if !missing.is_empty() {
        return Err(Error::input(format!("psi missing for sub-areas: {}", missing.join(", "))).into());
    }
    Ok(psi)
}

/// Columns of `draws` in registry order; all-NaN columns mark
/// non-estimable sub-areas.
fn subarea_columns(draws: &PosteriorDraws, registry: &DomainRegistry) -> CliResult<(Vec<usize>, Vec<bool>)> {
    let missing: Vec<&str> =
        registry.subareas.iter().filter(|id| draws.index_of(id).is_none()).map(String::as_str).collect();
    let unknown: Vec<&str> =
        draws.names.iter().filter(|n| registry.subarea_idx(n).is_none()).map(String::as_str).collect();
    if !missing.is_empty() || !unknown.is_empty() {
        return Err(Error::input(format!(
            "draw columns do not match the shares: missing [{}], unknown [{}]",
            missing.join(", "),
            unknown.join(", ")
        ))
        .into());
    }
    let cols: Vec<usize> = registry.subareas.iter().map(|id| draws.index_of(id).expect("checked")).collect();
    let mut estimable = Vec::with_capacity(cols.len());
    for (j, &c) in cols.iter().enumerate() {
        let nan = draws.iter().filter(|d| d[c].is_nan()).count();
        if nan != 0 && nan != draws.n_draws() {
            return Err(Error::input(format!("sub-area `{}` has {nan} missing draws", registry.subareas[j])).into());
        }
        estimable.push(nan == 0 || draws.n_draws() == 0);
    }
    Ok((cols, estimable))
}

pub fn cmd_benchmark(args: &BenchmarkArgs) -> CliResult<()> {
    if !(args.t > 0.0 && args.t < 1.0) {
        return Err(Error::input(format!("benchmark t = {} must lie in (0, 1)", args.t)).into());
    }
    let registry = load_registry(&args.shares)?;
    let draws = PosteriorDraws::read_csv(open(&args.draws)?)?;
    if draws.n_draws() == 0 {
        return Err(Error::input("no draws to benchmark").into());
    }
    let (cols, estimable) = subarea_columns(&draws, &registry)?;
    let psi = args.psi.as_deref().map(|p| read_psi(p, &registry)).transpose()?;
    let kept: Vec<usize> = (0..cols.len()).filter(|&j| estimable[j]).collect();
    if kept.is_empty() {
        return Err(Error::input("no estimable sub-areas in the draws").into());
    }
    let mass: f64 = kept.iter().map(|&j| registry.national_share[j]).sum();
    let q: Vec<f64> = kept.iter().map(|&j| registry.national_share[j] / mass).collect();
    let problem = BenchmarkProblem::new(q, psi.map(|p| kept.iter().map(|&j| p[j]).collect()), args.t)?;
    let loss: Loss = args.loss.into();

    let input: Vec<Vec<f64>> = draws.iter().map(|d| kept.iter().map(|&j| d[cols[j]]).collect()).collect();
    let projected = benchmark::project_posterior(&input, &problem, loss)?;
    let report = benchmark::feasibility(&projected, &problem, loss);

    let full: Vec<Vec<f64>> = projected
        .iter()
        .map(|row| {
            let mut out = vec![f64::NAN; registry.n_subareas()];
            for (k, &j) in kept.iter().enumerate() {
                out[j] = row[k];
            }
            out
        })
        .collect();
    let (theta_area, area_provenance, mut warnings) = posterior::aggregate_areas(&registry, &full, &estimable)?;
    if mass < 1.0 - 1e-12 {
        warnings.push(format!("benchmark shares renormalized over {mass:.6} of the population"));
    }
    let estimands = EstimandDraws {
        subarea_ids: registry.subareas.clone(),
        area_ids: registry.areas.clone(),
        theta_subarea: full,
        theta_area,
        subarea_provenance: estimable.iter().map(|&e| e.then_some(Provenance::Benchmarked)).collect(),
        area_provenance,
        warnings,
    };

    let mut inputs: Vec<&Path> = vec![&args.draws, &args.shares];
    inputs.extend(args.psi.as_deref());
    let config = json!({ "t": args.t, "loss": loss, "psi": args.psi.is_some() });
    let manifest = RunManifest::new("benchmark", config, None, &inputs)?;
    prepare_out(&args.out)?;
    write_draws(
        &args.out,
        "projected_draws.csv",
        &draws_table(&registry.subareas, &estimands.theta_subarea, draws.chains, draws.kept),
    )?;
    let mut w = create(&args.out, "estimates.csv")?;
    write_estimates_csv(&mut w, &estimands.summaries())?;
    w.flush()?;
    write_json(&args.out, "feasibility.json", &json!({ "report": report, "warnings": estimands.warnings }))?;
    manifest.finish(&args.out)?;
    Ok(())
}

fn simulation_config(args: &SimulateArgs) -> CliResult<SimulationConfig> {
    let mut cfg = match &args.config {
        Some(p) => {
            let mut cfg: SimulationConfig = read_json(p)?;
            if let Some(s) = args.scenario {
                let (a, b) = simulate::scenario_scales(s)?;
                cfg.sigma_a = a;
                cfg.sigma_s = b;
                cfg.scenario = s.to_string();
            }
            cfg
        }
        None => {
            let s = args.scenario.unwrap_or(1);
            if args.desk {
                SimulationConfig::desk(s)?
            } else {
                SimulationConfig::full(s)?
            }
        }
    };
    if let Some(b) = args.replicates {
        cfg.replicates = b;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_simulate(args: &SimulateArgs) -> CliResult<()> {
    let config = simulation_config(args)?;
    let inputs: Vec<&Path> = args.config.iter().map(PathBuf::as_path).collect();
    let mut manifest = RunManifest::new("simulate", serde_json::to_value(&config)?, Some(config.seed), &inputs)?;
    prepare_out(&args.out)?;
    let report = simulate::run_study(&config, Some(&args.out))?;
    let mut w = create(&args.out, "report.csv")?;
    simulate::write_report_csv(&mut w, &report)?;
    w.flush()?;
    write_json(&args.out, "summary.json", &report)?;
    manifest.extra = json!({ "timing": report.timing });
    manifest.finish(&args.out)?;
    Ok(())
}

#[derive(Serialize)]
struct LevelReport {
    domains: usize,
    estimated: usize,
    out_of_sample: usize,
    median_cv_direct: Option<f64>,
    median_cv_model: Option<f64>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn cmd_report(args: &ReportArgs) -> CliResult<()> {
    let registry = load_registry(&args.shares)?;
    let direct = read_direct_csv(open(&args.direct)?, &registry)?;
    let rows = read_estimates_csv(open(&args.estimates)?)?;
    let mut by_key: HashMap<(Level, &str), &EstimateRow> = HashMap::new();
    for r in &rows {
        let known = match r.level {
            Level::Area => registry.area_idx(&r.domain_id).is_some(),
            Level::Subarea => registry.subarea_idx(&r.domain_id).is_some(),
        };
        if !known {
            return Err(Error::input(format!("estimate for unknown {} `{}`", r.level, r.domain_id)).into());
        }
        by_key.insert((r.level, r.domain_id.as_str()), r);
    }

    let manifest = RunManifest::new("report", json!({}), None, &[&args.estimates, &args.direct, &args.shares])?;
    prepare_out(&args.out)?;
    let mut w = csv::Writer::from_writer(create(&args.out, "comparison.csv")?);
    w.write_record([
        "domain_id",
        "level",
        "in_sample",
        "n",
        "n_eff",
        "direct",
        "cv_direct",
        "estimate",
        "sd",
        "q05",
        "q95",
        "cv_model",
        "provenance",
    ])?;
    let mut levels = BTreeMap::new();
    for level in [Level::Area, Level::Subarea] {
        let (mut cv_d, mut cv_m) = (Vec::new(), Vec::new());
        let mut estimated = 0;
        let list = direct.level(level);
        for e in list {
            let cv_direct = match (e.estimate, e.effective_size) {
                (Some(y), Some(n)) if y > 0.0 && n > 0.0 => Some((y * (1.0 - y) / n).sqrt() / y),
                _ => None,
            };
            let est = by_key.get(&(level, e.domain_id.as_str()));
            let cv_model = est.and_then(|r| (r.summary.mean > 0.0).then(|| r.summary.sd / r.summary.mean));
            cv_d.extend(cv_direct);
            cv_m.extend(cv_model);
            estimated += usize::from(est.is_some());
            w.write_record([
                e.domain_id.clone(),
                level.to_string(),
                e.in_sample.to_string(),
                e.sample_size.to_string(),
                fmt_opt(e.effective_size),
                fmt_opt(e.estimate),
                fmt_opt(cv_direct),
                fmt_opt(est.map(|r| r.summary.mean)),
                fmt_opt(est.map(|r| r.summary.sd)),
                fmt_opt(est.map(|r| r.summary.q05)),
                fmt_opt(est.map(|r| r.summary.q95)),
                fmt_opt(cv_model),
                est.map(|r| r.provenance.as_str().to_owned()).unwrap_or_default(),
            ])?;
        }
        levels.insert(
            level.to_string(),
            LevelReport {
                domains: list.len(),
                estimated,
                out_of_sample: list.iter().filter(|e| !e.in_sample).count(),
                median_cv_direct: median(cv_d),
                median_cv_model: median(cv_m),
            },
        );
    }
    w.flush()?;

    // largest gap between an area estimate and the share-weighted mean of
    // its estimated sub-areas
    let mut max_gap: Option<f64> = None;
    for (a, id) in registry.areas.iter().enumerate() {
        let Some(area) = by_key.get(&(Level::Area, id.as_str())) else { continue };
        let subs: Vec<(f64, f64)> = registry
            .subareas_of(a)
            .into_iter()
            .filter_map(|j| {
                by_key
                    .get(&(Level::Subarea, registry.subareas[j].as_str()))
                    .map(|r| (registry.subarea_share[j], r.summary.mean))
            })
            .collect();
        let mass: f64 = subs.iter().map(|s| s.0).sum();
        if subs.is_empty() || mass <= 0.0 {
            continue;
        }
        let agg = subs.iter().map(|(q, m)| q * m).sum::<f64>() / mass;
        let gap = (area.summary.mean - agg).abs();
        max_gap = Some(max_gap.map_or(gap, |g: f64| g.max(gap)));
    }
    write_json(&args.out, "summary.json", &json!({ "levels": levels, "max_coherence_gap": max_gap }))?;
    manifest.finish(&args.out)?;
    Ok(())
}
