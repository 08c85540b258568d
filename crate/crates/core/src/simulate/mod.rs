//! Design-based simulation: a fixed synthetic population, repeated two-stage
//! cluster samples with a fixed out-of-sample pattern, and frequentist
//! metrics of the model-based estimators.

mod metrics;
mod study;


pub use metrics::{compute_metrics, DomainMetrics, Group, GroupSummary, IntervalEstimates};
pub use study::{
    estimate_replicate, run_study, write_report_csv, FailedFit, FitRecord, ModelFitSummary, ReplicateEstimates,
    ReplicateTiming, SimulationReport, REPORT_HEADER,
};

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{CovariateTable, Variant};
use crate::rng;
use crate::sampler::SamplerConfig;
use crate::survey::{DomainRegistry, ShareRow, SurveyDataset, SurveyRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OosPattern {
    pub n_oos_subareas: usize,
    pub n_affected_areas: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub scenario: String,
    #[serde(rename = "N")]
    pub population_size: usize,
    pub clusters: usize,
    #[serde(rename = "D")]
    pub areas: usize,
    #[serde(rename = "M_per_area")]
    pub subareas_per_area: usize,
    pub sigma_c: f64,
    pub sigma_a: f64,
    pub sigma_s: f64,
    /// Unit-level residual scale.
    #[serde(default = "default_sigma_e")]
    pub sigma_e: f64,
    /// Overall fraction of the population that is sampled.
    pub sampling_rate: f64,
    /// First-stage fraction of clusters sampled in each in-sample sub-area.
    #[serde(default = "default_cluster_rate")]
    pub cluster_rate: f64,
    /// Poverty line as a quantile of the population score.
    #[serde(default = "default_poverty_quantile")]
    pub poverty_quantile: f64,
    /// Correlation of the informative covariates with their effects.
    #[serde(default = "default_covariate_correlation")]
    pub covariate_correlation: f64,
    #[serde(rename = "B")]
    pub replicates: usize,
    pub oos_pattern: OosPattern,
    pub seed: u64,
    #[serde(default = "default_models")]
    pub models: Vec<Variant>,
    #[serde(default)]
    pub sampler: SamplerConfig,
    /// Project draws onto the national rate before summarizing.
    #[serde(default = "default_true")]
    pub benchmark: bool,
    /// Fits with a larger share of divergent transitions are discarded.
    #[serde(default = "default_max_divergence_rate")]
    pub max_divergence_rate: f64,
    /// Fits whose largest split R-hat exceeds this are discarded as
    /// non-converged.
    #[serde(default = "default_max_rhat")]
    pub max_rhat: f64,
}

fn default_sigma_e() -> f64 {
    0.5
}
fn default_cluster_rate() -> f64 {
    1.0 / 6.0
}
fn default_poverty_quantile() -> f64 {
    0.2
}
fn default_covariate_correlation() -> f64 {
    0.6
}
fn default_models() -> Vec<Variant> {
    Variant::ALL.to_vec()
}
fn default_true() -> bool {
    true
}
fn default_max_divergence_rate() -> f64 {
    0.5
}
fn default_max_rhat() -> f64 {
    1.1
}

impl SimulationConfig {
    /// Full-size study: 180,000 units in 3,600 clusters, 30 areas of 5
    /// sub-areas, 37 out-of-sample sub-areas in 15 areas.
    pub fn full(scenario: u8) -> Result<Self> {
        let (sigma_a, sigma_s) = scenario_scales(scenario)?;
        Ok(Self {
            scenario: format!("scenario {scenario}"),
            population_size: 180_000,
            clusters: 3_600,
            areas: 30,
            subareas_per_area: 5,
            sigma_c: 0.2,
            sigma_a,
            sigma_s,
            sigma_e: default_sigma_e(),
            sampling_rate: 0.02,
            cluster_rate: default_cluster_rate(),
            poverty_quantile: default_poverty_quantile(),
            covariate_correlation: default_covariate_correlation(),
            replicates: 1_000,
            oos_pattern: OosPattern { n_oos_subareas: 37, n_affected_areas: 15 },
            seed: 2024 + u64::from(scenario),
            models: default_models(),
            sampler: SamplerConfig::default(),
            benchmark: true,
            max_divergence_rate: default_max_divergence_rate(),
            max_rhat: default_max_rhat(),
        })
    }

    /// Desk-scale study: 10 areas of 5 sub-areas with the same population
    /// density per sub-area, 50 replicates, 2 chains of 500 kept draws.
    pub fn desk(scenario: u8) -> Result<Self> {
        Ok(Self {
            population_size: 60_000,
            clusters: 1_200,
            areas: 10,
            replicates: 50,
            oos_pattern: OosPattern { n_oos_subareas: 12, n_affected_areas: 5 },
            sampler: SamplerConfig { chains: 2, iterations: 1_000, warmup: 500, ..SamplerConfig::default() },
            ..Self::full(scenario)?
        })
    }

    pub fn n_subareas(&self) -> usize {
        self.areas * self.subareas_per_area
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.n_subareas();
        if self.areas == 0 || self.subareas_per_area == 0 {
            return Err(Error::input("D and M_per_area must be positive"));
        }
        if self.clusters % m != 0 || self.clusters < m {
            return Err(Error::input(format!(
                "clusters ({}) must be a positive multiple of D * M_per_area ({m})",
                self.clusters
            )));
        }
        if self.population_size % self.clusters != 0 || self.population_size < self.clusters {
            return Err(Error::input(format!(
                "N ({}) must be a positive multiple of clusters ({})",
                self.population_size, self.clusters
            )));
        }
        for (name, v) in
            [("sigma_c", self.sigma_c), ("sigma_a", self.sigma_a), ("sigma_s", self.sigma_s), ("sigma_e", self.sigma_e)]
        {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::input(format!("{name} must be positive")));
            }
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate < 1.0) {
            return Err(Error::input("sampling_rate must lie in (0, 1)"));
        }
        if !(self.cluster_rate > 0.0 && self.cluster_rate <= 1.0) {
            return Err(Error::input("cluster_rate must lie in (0, 1]"));
        }
        if !(self.poverty_quantile > 0.0 && self.poverty_quantile < 1.0) {
            return Err(Error::input("poverty_quantile must lie in (0, 1)"));
        }
        if !(self.covariate_correlation.abs() < 1.0) {
            return Err(Error::input("covariate_correlation must lie in (-1, 1)"));
        }
        if self.replicates == 0 {
            return Err(Error::input("B must be at least 1"));
        }
        if self.models.is_empty() {
            return Err(Error::input("no models to fit"));
        }
        if !(0.0..=1.0).contains(&self.max_divergence_rate) {
            return Err(Error::input("max_divergence_rate must lie in [0, 1]"));
        }
        if !(self.max_rhat >= 1.0) {
            return Err(Error::input("max_rhat must be at least 1"));
        }
        let p = self.oos_pattern;
        if p.n_oos_subareas > 0 {
            if p.n_affected_areas == 0 || p.n_affected_areas > self.areas {
                return Err(Error::input("oos_pattern.n_affected_areas must lie in 1..=D"));
            }
            if p.n_oos_subareas < p.n_affected_areas
                || p.n_oos_subareas.div_ceil(p.n_affected_areas) >= self.subareas_per_area
            {
                return Err(Error::input(
                    "oos_pattern must remove at least one and fewer than M_per_area sub-areas in each affected area",
                ));
            }
        }
        let rate_in = self.in_sample_rate();
        if rate_in > self.cluster_rate {
            return Err(Error::input(format!(
                "in-sample sampling rate {rate_in:.4} exceeds cluster_rate {}",
                self.cluster_rate
            )));
        }
        self.sampler.validate()
    }

    /// Sampling rate inside in-sample sub-areas that yields the overall rate.
    fn in_sample_rate(&self) -> f64 {
        let m = self.n_subareas();
        self.sampling_rate * m as f64 / (m - self.oos_pattern.n_oos_subareas) as f64
    }
}

/// `(sigma_a, sigma_s)` of the two scenarios.
pub fn scenario_scales(scenario: u8) -> Result<(f64, f64)> {
    match scenario {
        1 => Ok((0.08, 0.13)),
        2 => Ok((0.13, 0.08)),
        _ => Err(Error::input(format!("unknown scenario {scenario} (expected 1 or 2)"))),
    }
}

/// A synthetic population. Units are stored contiguously by cluster and
/// clusters contiguously by sub-area.
#[derive(Clone, Debug)]
pub struct Population {
    pub registry: DomainRegistry,
    pub clusters_per_subarea: usize,
    pub units_per_cluster: usize,
    pub score: Vec<f64>,
    pub poor: Vec<u8>,
    pub area_effect: Vec<f64>,
    pub subarea_effect: Vec<f64>,
    pub cluster_effect: Vec<f64>,
    pub theta_area: Vec<f64>,
    pub theta_subarea: Vec<f64>,
    pub national_rate: f64,
    pub oos_subarea: Vec<bool>,
    /// Areas with at least one out-of-sample sub-area.
    pub oos_area: Vec<bool>,
    pub area_covariates: CovariateTable,
    pub subarea_covariates: CovariateTable,
}

impl Population {
    pub fn units_per_subarea(&self) -> usize {
        self.clusters_per_subarea * self.units_per_cluster
    }

    pub fn covariate_names() -> Vec<String> {
        ["x1", "x2", "noise"].iter().map(|s| (*s).to_owned()).collect()
    }
}

fn area_id(d: usize) -> String {
    format!("A{:03}", d + 1)
}

fn subarea_id(d: usize, j: usize) -> String {
    format!("A{:03}-S{:02}", d + 1, j + 1)
}

/// Two informative covariates with correlation `rho` to the standardized
/// effect, and one pure-noise column.
fn covariates<R: Rng>(rng: &mut R, ids: &[String], effect: &[f64], sigma: f64, rho: f64) -> CovariateTable {
    let z = Normal::new(0.0, 1.0).expect("unit normal");
    let rest = (1.0 - rho * rho).sqrt();
    let rows = ids
        .iter()
        .zip(effect)
        .map(|(id, e)| {
            let x1 = rho * e / sigma + rest * z.sample(rng);
            let x2 = rho * e / sigma + rest * z.sample(rng);
            let noise = z.sample(rng);
            (id.clone(), vec![Some(x1), Some(x2), Some(noise)])
        })
        .collect();
    CovariateTable { columns: Population::covariate_names(), rows }
}

/// Generate the population and its exact domain proportions.
pub fn generate_population(config: &SimulationConfig) -> Result<Population> {
    config.validate()?;
    let (d_n, m_d) = (config.areas, config.subareas_per_area);
    let m = config.n_subareas();
    let c_per = config.clusters / m;
    let u_per = config.population_size / config.clusters;
    let n = config.population_size;

    let mut rng = rng::stream(config.seed, &[rng::hash_str("population")]);
    let draw = |rng: &mut rand_chacha::ChaCha8Rng, sd: f64, k: usize| -> Vec<f64> {
        let dist = Normal::new(0.0, sd).expect("positive scale");
        (0..k).map(|_| dist.sample(rng)).collect()
    };
    let area_effect = draw(&mut rng, config.sigma_a, d_n);
    let subarea_effect = draw(&mut rng, config.sigma_s, m);
    let cluster_effect = draw(&mut rng, config.sigma_c, config.clusters);
    let residual = Normal::new(0.0, config.sigma_e).expect("positive scale");
    let score: Vec<f64> = (0..n)
        .map(|i| {
            let c = i / u_per;
            let j = c / c_per;
            area_effect[j / m_d] + subarea_effect[j] + cluster_effect[c] + residual.sample(&mut rng)
        })
        .collect();

    // the k lowest scores are poor
    let k = (config.poverty_quantile * n as f64).round() as usize;
    let mut sorted = score.clone();
    let (_, &mut threshold, _) = sorted.select_nth_unstable_by(k.min(n - 1), f64::total_cmp);
    let poor: Vec<u8> = score.iter().map(|&s| u8::from(k == n || s < threshold)).collect();

    let units_sub = c_per * u_per;
    let theta_subarea: Vec<f64> = (0..m)
        .map(|j| poor[j * units_sub..(j + 1) * units_sub].iter().map(|&p| f64::from(p)).sum::<f64>() / units_sub as f64)
        .collect();
    let units_area = m_d * units_sub;
    let theta_area: Vec<f64> = (0..d_n)
        .map(|d| {
            poor[d * units_area..(d + 1) * units_area].iter().map(|&p| f64::from(p)).sum::<f64>() / units_area as f64
        })
        .collect();
    let national_rate = poor.iter().map(|&p| f64::from(p)).sum::<f64>() / n as f64;

    let shares: Vec<ShareRow> = (0..m)
        .map(|j| ShareRow { subarea_id: subarea_id(j / m_d, j % m_d), area_id: area_id(j / m_d), q: 1.0 / m as f64 })
        .collect();
    let registry = DomainRegistry::from_shares(&shares)?;

    // fixed out-of-sample pattern
    let mut oos_rng = rng::stream(config.seed, &[rng::hash_str("oos-pattern")]);
    let mut oos_subarea = vec![false; m];
    let mut oos_area = vec![false; d_n];
    let p = config.oos_pattern;
    if p.n_oos_subareas > 0 {
        let mut affected = index::sample(&mut oos_rng, d_n, p.n_affected_areas).into_vec();
        affected.sort_unstable();
        let base = p.n_oos_subareas / p.n_affected_areas;
        let extra = p.n_oos_subareas % p.n_affected_areas;
        for (r, &d) in affected.iter().enumerate() {
            let count = base + usize::from(r < extra);
            oos_area[d] = true;
            for j in index::sample(&mut oos_rng, m_d, count) {
                oos_subarea[d * m_d + j] = true;
            }
        }
    }

    let mut cov_rng = rng::stream(config.seed, &[rng::hash_str("covariates")]);
    let rho = config.covariate_correlation;
    let area_covariates = covariates(&mut cov_rng, &registry.areas, &area_effect, config.sigma_a, rho);
    let subarea_covariates = covariates(&mut cov_rng, &registry.subareas, &subarea_effect, config.sigma_s, rho);

    Ok(Population {
        registry,
        clusters_per_subarea: c_per,
        units_per_cluster: u_per,
        score,
        poor,
        area_effect,
        subarea_effect,
        cluster_effect,
        theta_area,
        theta_subarea,
        national_rate,
        oos_subarea,
        oos_area,
        area_covariates,
        subarea_covariates,
    })
}

/// Clusters and units per cluster drawn in each in-sample sub-area.
pub fn stage_sizes(population: &Population, config: &SimulationConfig) -> (usize, usize) {
    let c = population.clusters_per_subarea;
    let u = population.units_per_cluster;
    let k = ((config.cluster_rate * c as f64).round() as usize).clamp(1, c);
    let stage2 = config.in_sample_rate() * c as f64 / k as f64;
    let n = ((stage2 * u as f64).round() as usize).clamp(1, u);
    (k, n)
}

/// One two-stage sample: simple random samples of clusters within each
/// in-sample sub-area, then of units within the selected clusters.
/// Weights are exact inverse inclusion probabilities.
pub fn draw_sample(population: &Population, config: &SimulationConfig, replicate: usize) -> Result<SurveyDataset> {
    let mut rng = rng::stream(config.seed, &[rng::hash_str("replicate"), replicate as u64]);
    let reg = &population.registry;
    let c_per = population.clusters_per_subarea;
    let u_per = population.units_per_cluster;
    let (k, n_u) = stage_sizes(population, config);
    let weight = (c_per as f64 / k as f64) * (u_per as f64 / n_u as f64);
    let mut records = Vec::new();
    for j in 0..reg.n_subareas() {
        if population.oos_subarea[j] {
            continue;
        }
        let mut chosen = index::sample(&mut rng, c_per, k).into_vec();
        chosen.sort_unstable();
        for c in chosen {
            let cluster = j * c_per + c;
            let mut units = index::sample(&mut rng, u_per, n_u).into_vec();
            units.sort_unstable();
            for u in units {
                let i = cluster * u_per + u;
                records.push(SurveyRecord {
                    area_id: reg.areas[reg.subarea_area[j]].clone(),
                    subarea_id: reg.subareas[j].clone(),
                    cluster_id: format!("{}-C{:03}", reg.subareas[j], c + 1),
                    stratum_id: reg.subareas[j].clone(),
                    weight,
                    poor: population.poor[i],
                    household_id: None,
                });
            }
        }
    }
    SurveyDataset::new(records, reg.clone())
}
