//! Multi-chain Hamiltonian Monte Carlo over an unconstrained parameter space.
//!
//! The transition is the multinomial No-U-Turn sampler with a diagonal
//! metric; warm-up adapts the step size by dual averaging and the metric in
//! doubling windows. Chains run in parallel, each with an RNG stream derived
//! from `(seed, chain)`, so results do not depend on the thread count.

mod adapt;
pub mod diagnostics;
pub mod loo;
mod nuts;

use std::io::{Read, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use diagnostics::{summarize, ParamDiagnostics};
pub use loo::{looic, LooResult};

use crate::error::{Error, Result};
use crate::rng;

/// A differentiable log-density over `R^dim`.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Log-density at `x`; `grad` is overwritten with its gradient.
    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

impl LogDensity for crate::models::Model {
    fn dim(&self) -> usize {
        crate::models::Model::dim(self)
    }

    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.log_posterior_grad(x, grad)
    }
}

/// Adapter for a closure returning the value and filling the gradient.
pub struct FnDensity<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64], &mut [f64]) -> f64 + Sync> LogDensity for FnDensity<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        (self.f)(x, grad)
    }
}

/// Central finite-difference gradients of a value-only log-density.
pub struct FiniteDiff<F> {
    pub dim: usize,
    pub f: F,
    pub step: f64,
}

impl<F: Fn(&[f64]) -> f64 + Sync> FiniteDiff<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f, step: 1e-6 }
    }
}

impl<F: Fn(&[f64]) -> f64 + Sync> LogDensity for FiniteDiff<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let mut y = x.to_vec();
        for i in 0..x.len() {
            let h = self.step * x[i].abs().max(1.0);
            y[i] = x[i] + h;
            let up = (self.f)(&y);
            y[i] = x[i] - h;
            let down = (self.f)(&y);
            y[i] = x[i];
            grad[i] = (up - down) / (2.0 * h);
        }
        (self.f)(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub chains: usize,
    /// Total iterations per chain, warm-up included.
    pub iterations: usize,
    pub warmup: usize,
    pub seed: u64,
    pub target_acceptance: f64,
    pub max_tree_depth: u32,
    /// Initial values are drawn uniformly from `[-init_radius, init_radius]`.
    pub init_radius: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            iterations: 4000,
            warmup: 2000,
            seed: 0,
            target_acceptance: 0.8,
            max_tree_depth: 10,
            init_radius: 2.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 {
            return Err(Error::input("chains must be at least 1"));
        }
        if self.warmup >= self.iterations {
            return Err(Error::input(format!(
                "warmup ({}) must be smaller than iterations ({})",
                self.warmup, self.iterations
            )));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(Error::input("target_acceptance must lie in (0, 1)"));
        }
        if self.max_tree_depth == 0 || self.max_tree_depth > 30 {
            return Err(Error::input("max_tree_depth must lie in 1..=30"));
        }
        if !(self.init_radius.is_finite() && self.init_radius >= 0.0) {
            return Err(Error::input("init_radius must be non-negative"));
        }
        Ok(())
    }

    pub fn kept(&self) -> usize {
        self.iterations - self.warmup
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
    pub divergences: usize,
    pub max_depth_hits: usize,
    pub mean_accept: f64,
    pub leapfrog_steps: u64,
}

/// Kept draws of every chain, in unconstrained coordinates unless noted.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorDraws {
    pub names: Vec<String>,
    pub chains: usize,
    pub kept: usize,
    /// Chain-major, then iteration, then parameter.
    pub values: Vec<f64>,
    pub stats: Vec<ChainStats>,
}

impl PosteriorDraws {
    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn n_draws(&self) -> usize {
        self.chains * self.kept
    }

    pub fn draw(&self, chain: usize, iter: usize) -> &[f64] {
        let p = self.dim();
        let at = (chain * self.kept + iter) * p;
        &self.values[at..at + p]
    }

    /// Draws in chain-major order.
    pub fn iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.values.chunks_exact(self.dim().max(1)).take(self.n_draws())
    }

    /// Per-chain sequences of parameter `k`.
    pub fn param_chains(&self, k: usize) -> Vec<Vec<f64>> {
        (0..self.chains).map(|c| (0..self.kept).map(|i| self.draw(c, i)[k]).collect()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn divergences(&self) -> usize {
        self.stats.iter().map(|s| s.divergences).sum()
    }

    pub fn divergence_rate(&self) -> f64 {
        self.divergences() as f64 / self.n_draws().max(1) as f64
    }

    /// Apply `f` to every draw, producing draws of new quantities.
    pub fn map(&self, names: Vec<String>, f: impl Fn(&[f64]) -> Vec<f64> + Sync) -> PosteriorDraws {
        let rows: Vec<Vec<f64>> = self.iter().collect::<Vec<_>>().par_iter().map(|d| f(d)).collect();
        PosteriorDraws {
            names,
            chains: self.chains,
            kept: self.kept,
            values: rows.into_iter().flatten().collect(),
            stats: self.stats.clone(),
        }
    }

    pub fn diagnostics(&self) -> Vec<ParamDiagnostics> {
        (0..self.dim()).into_par_iter().map(|k| summarize(&self.names[k], &self.param_chains(k))).collect()
    }

    /// Columnar CSV: `chain,iter,<names...>`. Floats use the shortest
    /// representation that round-trips.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["chain".to_owned(), "iter".to_owned()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for c in 0..self.chains {
            for i in 0..self.kept {
                let mut rec = vec![c.to_string(), i.to_string()];
                rec.extend(self.draw(c, i).iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Read draws written by [`PosteriorDraws::write_csv`]; chain stats are
    /// not part of the CSV and come back empty.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        if header.get(0) != Some("chain") || header.get(1) != Some("iter") {
            return Err(Error::Schema { file: "draws".into(), row: 1, message: "expected chain,iter columns".into() });
        }
        let names: Vec<String> = header.iter().skip(2).map(str::to_owned).collect();
        let mut values = Vec::new();
        let mut per_chain: Vec<usize> = Vec::new();
        for (k, rec) in r.records().enumerate() {
            let rec = rec?;
            let schema = |m: String| Error::Schema { file: "draws".into(), row: k + 2, message: m };
            let c: usize = rec[0].parse().map_err(|_| schema("bad chain index".into()))?;
            let i: usize = rec[1].parse().map_err(|_| schema("bad iteration index".into()))?;
            if c != per_chain.len().saturating_sub(1) && c != per_chain.len() {
                return Err(schema("chains must be contiguous".into()));
            }
            if c == per_chain.len() {
                per_chain.push(0);
            }
            if i != per_chain[c] {
                return Err(schema("iterations must be consecutive".into()));
            }
            per_chain[c] += 1;
            for cell in rec.iter().skip(2) {
                values.push(cell.parse::<f64>().map_err(|_| schema(format!("`{cell}` is not a number")))?);
            }
        }
        let kept = per_chain.first().copied().unwrap_or(0);
        if per_chain.iter().any(|&n| n != kept) {
            return Err(Error::input("chains have unequal lengths"));
        }
        Ok(Self { names, chains: per_chain.len(), kept, values, stats: Vec::new() })
    }
}

/// Run `config.chains` independent chains.
pub fn sample<D: LogDensity + ?Sized>(
    density: &D,
    names: Vec<String>,
    config: &SamplerConfig,
) -> Result<PosteriorDraws> {
    config.validate()?;
    let dim = density.dim();
    if names.len() != dim {
        return Err(Error::input("parameter names do not match the dimension"));
    }
    let results: Vec<Result<(Vec<f64>, ChainStats)>> =
        (0..config.chains).into_par_iter().map(|c| run_chain(density, config, c)).collect();
    let mut values = Vec::with_capacity(config.chains * config.kept() * dim);
    let mut stats = Vec::with_capacity(config.chains);
    for r in results {
        let (v, s) = r?;
        values.extend(v);
        stats.push(s);
    }
    Ok(PosteriorDraws { names, chains: config.chains, kept: config.kept(), values, stats })
}

fn initial_point<D: LogDensity + ?Sized, R: Rng>(density: &D, config: &SamplerConfig, rng: &mut R) -> Result<Vec<f64>> {
    let dim = density.dim();
    let mut grad = vec![0.0; dim];
    for _ in 0..100 {
        let x: Vec<f64> = (0..dim)
            .map(|_| {
                if config.init_radius > 0.0 {
                    rng.random_range(-config.init_radius..=config.init_radius)
                } else {
                    0.0
                }
            })
            .collect();
        let lp = density.log_density_grad(&x, &mut grad);
        if lp.is_finite() && grad.iter().all(|g| g.is_finite()) {
            return Ok(x);
        }
    }
    Err(Error::numerical("no finite log-density found in 100 initialization attempts"))
}

fn run_chain<D: LogDensity + ?Sized>(
    density: &D,
    config: &SamplerConfig,
    chain: usize,
) -> Result<(Vec<f64>, ChainStats)> {
    let mut rng = rng::stream(config.seed, &[rng::hash_str("chain"), chain as u64]);
    let x0 = initial_point(density, config, &mut rng)?;
    let mut sampler = nuts::Nuts::new(density, x0, config.max_tree_depth);
    sampler.init_step_size(&mut rng)?;
    let mut da = adapt::DualAveraging::new(sampler.step_size, config.target_acceptance);
    let mut windows = adapt::MetricWindows::new(config.warmup, density.dim());

    for _ in 0..config.warmup {
        let t = sampler.transition(&mut rng);
        sampler.step_size = da.learn(t.accept_stat);
        if windows.observe(sampler.position()) {
            sampler.inv_metric = windows.metric().to_vec();
            sampler.init_step_size(&mut rng)?;
            da = adapt::DualAveraging::new(sampler.step_size, config.target_acceptance);
        }
    }
    if config.warmup > 0 {
        sampler.step_size = da.final_step_size();
    }

    let dim = density.dim();
    let mut values = Vec::with_capacity(config.kept() * dim);
    let mut stats = ChainStats::default();
    let mut accept_sum = 0.0;
    for _ in 0..config.kept() {
        let t = sampler.transition(&mut rng);
        values.extend_from_slice(sampler.position());
        accept_sum += t.accept_stat;
        stats.divergences += usize::from(t.divergent);
        stats.max_depth_hits += usize::from(t.depth >= config.max_tree_depth);
        stats.leapfrog_steps += t.leapfrog as u64;
    }
    stats.step_size = sampler.step_size;
    stats.inv_metric = sampler.inv_metric.clone();
    stats.mean_accept = accept_sum / config.kept() as f64;
    Ok((values, stats))
}
