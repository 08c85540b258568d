//! Joint log-posteriors of the three model variants.
//!
//! | variant | area likelihood | sub-area predictor                     |
//! |---------|-----------------|----------------------------------------|
//! | SMS     | yes, with `u_d` | `alpha_s + x'beta_s + v_dj + u_d`      |
//! | SA      | no              | `alpha_s + x'beta_s + v_dj + u_d`      |
//! | IMS     | yes, with `u_d` | `alpha_s + x'beta_s + v_dj`            |
//!
//! The area predictor is `alpha_a + x'beta_a + u_d`. Both likelihoods are
//! Extended Beta with `phi = n_eff - 1` and a level-specific correlation
//! `lambda` that is uniform on its data-dependent support.

mod covariates;
mod priors;

pub use covariates::{CovariateTable, Standardizer};
pub use priors::{GammaConfig, HorseshoeConfig, PriorConfig};

use priors::{normal_logpdf, EffectBlock, EffectState, HorseshoeBlock, HorseshoeState};
use serde::{Deserialize, Serialize};

use crate::eb::{self, EbParams};
use crate::error::{Error, Result};
use crate::survey::{DirectEstimates, DomainRegistry, Level};

/// Linear predictors are clipped to this magnitude before the inverse logit.
const ETA_LIMIT: f64 = 35.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "SMS", alias = "S-MS")]
    Sms,
    #[serde(rename = "SA")]
    Sa,
    #[serde(rename = "IMS", alias = "I-MS")]
    Ims,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Sms, Variant::Sa, Variant::Ims];

    pub fn has_area_level(self) -> bool {
        !matches!(self, Variant::Sa)
    }

    /// Whether `u_d` enters the sub-area predictor.
    pub fn shares_area_effect(self) -> bool {
        !matches!(self, Variant::Ims)
    }

    /// Whether area proportions are aggregated from sub-area proportions.
    pub fn aggregates(self) -> bool {
        !matches!(self, Variant::Ims)
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Sms => "S-MS",
            Variant::Sa => "SA",
            Variant::Ims => "I-MS",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "").as_str() {
            "SMS" => Ok(Variant::Sms),
            "SA" => Ok(Variant::Sa),
            "IMS" => Ok(Variant::Ims),
            _ => Err(Error::input(format!("unknown model variant `{s}`"))),
        }
    }
}

/// Serializable model configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub variant: Variant,
    #[serde(default)]
    pub area_covariates: Vec<String>,
    #[serde(default)]
    pub subarea_covariates: Vec<String>,
    #[serde(default)]
    pub prior: PriorConfig,
    #[serde(default)]
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            area_covariates: Vec::new(),
            subarea_covariates: Vec::new(),
            prior: PriorConfig::default(),
            seed: 0,
        }
    }
}

/// A direct estimate as the likelihood sees it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainObs {
    pub y: f64,
    pub phi: f64,
    pub m: u32,
}

impl DomainObs {
    pub fn new(y: f64, n_eff: f64, m: u32) -> Result<Self> {
        if !(0.0..=1.0).contains(&y) {
            return Err(Error::input(format!("direct estimate {y} outside [0, 1]")));
        }
        if m == 0 {
            return Err(Error::input("in-sample domain with censor exponent 0"));
        }
        Ok(Self { y, phi: EbParams::phi_from_effective_size(n_eff), m })
    }
}

/// Row-major covariate matrix aligned with a domain list.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DesignMatrix {
    pub columns: Vec<String>,
    pub rows: usize,
    pub values: Vec<f64>,
}

impl DesignMatrix {
    pub fn zeros(rows: usize) -> Self {
        Self { columns: Vec::new(), rows, values: Vec::new() }
    }

    pub fn cols(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.cols();
        &self.values[i * p..(i + 1) * p]
    }

    fn dot(&self, i: usize, beta: &[f64]) -> f64 {
        self.row(i).iter().zip(beta).map(|(a, b)| a * b).sum()
    }
}

/// Everything the likelihood needs, aligned with a domain registry.
#[derive(Clone, Debug)]
pub struct ModelData {
    pub registry: DomainRegistry,
    pub area_obs: Vec<Option<DomainObs>>,
    pub subarea_obs: Vec<Option<DomainObs>>,
    pub x_area: DesignMatrix,
    pub x_subarea: DesignMatrix,
    /// Out-of-sample sub-areas without covariates cannot be predicted.
    pub subarea_estimable: Vec<bool>,
    pub area_standardizer: Standardizer,
    pub subarea_standardizer: Standardizer,
}

impl ModelData {
    /// Assemble model data. Covariate tables are standardized column-wise.
    ///
    /// In-sample sub-areas and all areas (for variants with an area level)
    /// must have complete covariates; out-of-sample sub-areas without them
    /// are flagged non-estimable.
    pub fn new(
        registry: &DomainRegistry,
        direct: &DirectEstimates,
        spec: &ModelSpec,
        area_covariates: Option<&CovariateTable>,
        subarea_covariates: Option<&CovariateTable>,
    ) -> Result<Self> {
        if direct.areas.len() != registry.n_areas() || direct.subareas.len() != registry.n_subareas() {
            return Err(Error::input("direct estimates do not match the domain registry"));
        }
        let obs = |level: Level| -> Result<Vec<Option<DomainObs>>> {
            direct
                .level(level)
                .iter()
                .map(|e| match (e.in_sample, e.estimate, e.effective_size) {
                    (true, Some(y), Some(n)) => DomainObs::new(y, n, e.censor_exponent).map(Some),
                    (true, _, _) => Err(Error::input(format!("in-sample domain `{}` lacks an estimate", e.domain_id))),
                    (false, _, _) => Ok(None),
                })
                .collect()
        };
        let area_obs = obs(Level::Area)?;
        let subarea_obs = obs(Level::Subarea)?;

        let (x_area, area_standardizer) = match spec.variant.has_area_level() {
            true => {
                let (m, avail, st) =
                    covariates::design(&registry.areas, &spec.area_covariates, area_covariates, "area")?;
                let missing: Vec<&str> =
                    avail.iter().enumerate().filter(|(_, a)| !**a).map(|(i, _)| registry.areas[i].as_str()).collect();
                if !missing.is_empty() {
                    return Err(Error::input(format!("areas without covariates: {}", missing.join(", "))));
                }
                (m, st)
            }
            false => (DesignMatrix::zeros(registry.n_areas()), Standardizer::default()),
        };
        let (x_subarea, sub_avail, subarea_standardizer) =
            covariates::design(&registry.subareas, &spec.subarea_covariates, subarea_covariates, "subarea")?;
        let missing: Vec<&str> = (0..registry.n_subareas())
            .filter(|&j| !sub_avail[j] && subarea_obs[j].is_some())
            .map(|j| registry.subareas[j].as_str())
            .collect();
        if !missing.is_empty() {
            return Err(Error::input(format!("in-sample sub-areas without covariates: {}", missing.join(", "))));
        }
        Ok(Self {
            registry: registry.clone(),
            area_obs,
            subarea_obs,
            x_area,
            x_subarea,
            subarea_estimable: sub_avail,
            area_standardizer,
            subarea_standardizer,
        })
    }

    pub fn n_areas(&self) -> usize {
        self.registry.n_areas()
    }

    pub fn n_subareas(&self) -> usize {
        self.registry.n_subareas()
    }

    fn mean_effective_size(obs: &[Option<DomainObs>]) -> f64 {
        let (s, n) = obs.iter().flatten().fold((0.0, 0usize), |(s, n), o| (s + o.phi + 1.0, n + 1));
        if n == 0 {
            1.0
        } else {
            s / n as f64
        }
    }
}

/// Positions of every parameter block in the unconstrained vector.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub dim: usize,
    pub alpha_a: Option<usize>,
    pub alpha_s: usize,
    pub hs_area: Option<HorseshoeBlock>,
    pub hs_subarea: Option<HorseshoeBlock>,
    pub u: EffectBlock,
    pub v: EffectBlock,
    pub lambda_a: Option<usize>,
    pub lambda_s: usize,
}

impl Layout {
    fn new(variant: Variant, data: &ModelData, prior: &PriorConfig) -> Self {
        let mut next = 0usize;
        let mut take = |n: usize| {
            let s = next;
            next += n;
            s
        };
        let area = variant.has_area_level();
        let alpha_a = area.then(|| take(1));
        let alpha_s = take(1);
        let hs = &prior.horseshoe;
        let hs_block = |p: usize, mean_n: f64, start: usize| HorseshoeBlock {
            start,
            p,
            tau0: hs.global_scale(p, mean_n),
            slab_scale: hs.slab_scale,
            slab_df: hs.slab_df,
        };
        let pa = data.x_area.cols();
        let hs_area = (area && pa > 0).then(|| {
            let n = ModelData::mean_effective_size(&data.area_obs);
            hs_block(pa, n, take(2 * pa + 2))
        });
        let ps = data.x_subarea.cols();
        let hs_subarea = (ps > 0).then(|| {
            let n = ModelData::mean_effective_size(&data.subarea_obs);
            hs_block(ps, n, take(2 * ps + 2))
        });
        let effect = |n: usize, start: usize| EffectBlock {
            start,
            n,
            shape: prior.reff_gamma.shape,
            rate: prior.reff_gamma.rate,
            scale_sd: prior.reff_scale_sd,
        };
        let d = data.n_areas();
        let u = effect(d, take(2 * d + 1));
        let m = data.n_subareas();
        let v = effect(m, take(2 * m + 1));
        let lambda_a = area.then(|| take(1));
        let lambda_s = take(1);
        Self { dim: next, alpha_a, alpha_s, hs_area, hs_subarea, u, v, lambda_a, lambda_s }
    }
}

/// Map an unconstrained value into `[lower, 1]` with the affine-logistic
/// transform `lower + (1 - lower) * logistic(raw)`. Returns `lambda` and
/// `log |d lambda / d raw|`.
pub fn lambda_transform(raw: f64, mus: &[f64]) -> (f64, f64) {
    let lower = eb::lambda_lower_bound(mus);
    let s = logistic(raw);
    let lambda = lower + (1.0 - lower) * s;
    let log_jac = (1.0 - lower).ln() + log_logistic(raw) + log_logistic(-raw);
    (lambda, log_jac)
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log logistic(x) = -softplus(-x)`.
fn log_logistic(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn inv_logit_clipped(eta: f64) -> (f64, f64) {
    let e = eta.clamp(-ETA_LIMIT, ETA_LIMIT);
    let mu = logistic(e);
    let slope = if eta.abs() > ETA_LIMIT { 0.0 } else { mu * (1.0 - mu) };
    (mu, slope)
}

/// Constrained quantities of one parameter vector.
#[derive(Clone, Debug)]
pub struct Derived {
    pub alpha_a: Option<f64>,
    pub alpha_s: f64,
    pub beta_area: Vec<f64>,
    pub beta_subarea: Vec<f64>,
    pub tau_area: Option<f64>,
    pub tau_subarea: Option<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub sigma_u: f64,
    pub sigma_v: f64,
    /// Area means; empty for the sub-area model.
    pub mu_area: Vec<f64>,
    pub mu_subarea: Vec<f64>,
    pub lambda_a: Option<f64>,
    pub lambda_s: f64,
    /// Sub-area linear predictor without `v_dj`, for out-of-sample prediction.
    pub eta_subarea_fixed: Vec<f64>,
}

struct Forward {
    alpha_a: Option<f64>,
    alpha_s: f64,
    hs_area: Option<HorseshoeState>,
    hs_subarea: Option<HorseshoeState>,
    u: EffectState,
    v: EffectState,
    mu_area: Vec<f64>,
    slope_area: Vec<f64>,
    mu_subarea: Vec<f64>,
    slope_subarea: Vec<f64>,
    eta_subarea_fixed: Vec<f64>,
    log_prior: f64,
}

/// Per-level likelihood result: total, per-observation terms, and adjoints.
struct LevelLik {
    total: f64,
    pointwise: Vec<f64>,
    lambda: f64,
}

/// A model variant bound to its data: the log-posterior density over the
/// unconstrained parameter vector.
#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub data: ModelData,
    layout: Layout,
}

impl Model {
    pub fn new(spec: ModelSpec, data: ModelData) -> Result<Self> {
        spec.prior.validate()?;
        if spec.variant.has_area_level() && data.x_area.rows != data.n_areas() {
            return Err(Error::input("area covariates are not aligned with the areas"));
        }
        if data.x_subarea.rows != data.n_subareas() {
            return Err(Error::input("sub-area covariates are not aligned with the sub-areas"));
        }
        if data.x_area.values.iter().chain(&data.x_subarea.values).any(|v| !v.is_finite()) {
            return Err(Error::input("covariates must be finite"));
        }
        let layout = Layout::new(spec.variant, &data, &spec.prior);
        Ok(Self { spec, data, layout })
    }

    pub fn variant(&self) -> Variant {
        self.spec.variant
    }

    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    /// Names of the unconstrained parameters, in vector order.
    pub fn parameter_names(&self) -> Vec<String> {
        let l = &self.layout;
        let mut names = Vec::with_capacity(l.dim);
        if l.alpha_a.is_some() {
            names.push("alpha_a".to_owned());
        }
        names.push("alpha_s".to_owned());
        if let Some(b) = &l.hs_area {
            names.extend(b.names("beta_a", &self.data.x_area.columns));
        }
        if let Some(b) = &l.hs_subarea {
            names.extend(b.names("beta_s", &self.data.x_subarea.columns));
        }
        names.extend(l.u.names("u", &self.data.registry.areas));
        names.extend(l.v.names("v", &self.data.registry.subareas));
        if l.lambda_a.is_some() {
            names.push("lambda_a.raw".to_owned());
        }
        names.push("lambda_s.raw".to_owned());
        names
    }

    fn forward(&self, x: &[f64]) -> Forward {
        let l = &self.layout;
        let prior = &self.spec.prior;
        let mut log_prior = 0.0;
        let alpha_a = l.alpha_a.map(|i| x[i]);
        if let Some(a) = alpha_a {
            log_prior += normal_logpdf(a, prior.intercept_sd);
        }
        let alpha_s = x[l.alpha_s];
        log_prior += normal_logpdf(alpha_s, prior.intercept_sd);
        let hs_area = l.hs_area.map(|b| {
            let (st, lp) = b.forward(x);
            log_prior += lp;
            st
        });
        let hs_subarea = l.hs_subarea.map(|b| {
            let (st, lp) = b.forward(x);
            log_prior += lp;
            st
        });
        let (u, lp_u) = l.u.forward(x);
        let (v, lp_v) = l.v.forward(x);
        log_prior += lp_u + lp_v;

        let (mut mu_area, mut slope_area) = (Vec::new(), Vec::new());
        if let Some(alpha) = alpha_a {
            for d in 0..self.data.n_areas() {
                let mut eta = alpha + u.values[d];
                if let Some(st) = &hs_area {
                    eta += self.data.x_area.dot(d, &st.beta);
                }
                let (mu, s) = inv_logit_clipped(eta);
                mu_area.push(mu);
                slope_area.push(s);
            }
        }
        let m = self.data.n_subareas();
        let mut mu_subarea = Vec::with_capacity(m);
        let mut slope_subarea = Vec::with_capacity(m);
        let mut eta_fixed = Vec::with_capacity(m);
        let shared = self.variant().shares_area_effect();
        for j in 0..m {
            let mut eta = alpha_s;
            if let Some(st) = &hs_subarea {
                eta += self.data.x_subarea.dot(j, &st.beta);
            }
            if shared {
                eta += u.values[self.data.registry.subarea_area[j]];
            }
            eta_fixed.push(eta);
            let (mu, s) = inv_logit_clipped(eta + v.values[j]);
            mu_subarea.push(mu);
            slope_subarea.push(s);
        }
        // lambda priors: the uniform density 1/(1-L) cancels the affine factor of the Jacobian
        if let Some(i) = l.lambda_a {
            log_prior += log_logistic(x[i]) + log_logistic(-x[i]);
        }
        log_prior += log_logistic(x[l.lambda_s]) + log_logistic(-x[l.lambda_s]);
        Forward {
            alpha_a,
            alpha_s,
            hs_area,
            hs_subarea,
            u,
            v,
            mu_area,
            slope_area,
            mu_subarea,
            slope_subarea,
            eta_subarea_fixed: eta_fixed,
            log_prior,
        }
    }

    /// EB likelihood of one level. When `d_eta` is given, accumulates
    /// `d loglik / d eta` per domain and returns `d loglik / d raw`.
    fn level_likelihood(
        obs: &[Option<DomainObs>],
        mus: &[f64],
        slopes: &[f64],
        raw: f64,
        d_eta: Option<&mut [f64]>,
    ) -> (LevelLik, f64) {
        let (lower, argmax) = mus.iter().enumerate().fold((0.0_f64, None), |(lo, arg), (k, &mu)| {
            let b = (2.0 * mu - 1.0) / mu;
            if b > lo {
                (b, Some(k))
            } else {
                (lo, arg)
            }
        });
        let s = logistic(raw);
        let lambda = lower + (1.0 - lower) * s;
        let mut total = 0.0;
        let mut pointwise = Vec::new();
        let mut g_lambda = 0.0;
        let want_grad = d_eta.is_some();
        let mut d_eta = d_eta;
        for (k, o) in obs.iter().enumerate() {
            let Some(o) = o else { continue };
            let t = eb::eb_loglik_grad(o.y, mus[k], lambda, o.m, o.phi);
            total += t.value;
            pointwise.push(t.value);
            if let Some(de) = d_eta.as_deref_mut() {
                de[k] += t.d_mu * slopes[k];
                g_lambda += t.d_lambda;
            }
        }
        let mut d_raw = 0.0;
        if want_grad {
            d_raw = g_lambda * (1.0 - lower) * s * (1.0 - s);
            if let (Some(k), Some(de)) = (argmax, d_eta) {
                let mu = mus[k];
                de[k] += g_lambda * (1.0 - s) / (mu * mu) * slopes[k];
            }
        }
        (LevelLik { total, pointwise, lambda }, d_raw)
    }

    /// Log-prior including transform Jacobians.
    pub fn log_prior(&self, x: &[f64]) -> f64 {
        self.forward(x).log_prior
    }

    /// Sum of Extended Beta log-likelihood terms over in-sample domains.
    pub fn log_likelihood(&self, x: &[f64]) -> f64 {
        let (a, s) = self.pointwise_loglik(x);
        a.iter().chain(&s).sum()
    }

    pub fn log_posterior(&self, x: &[f64]) -> f64 {
        let mut g = vec![0.0; self.dim()];
        self.log_posterior_grad(x, &mut g)
    }

    /// Per-observation log-likelihoods `(area terms, sub-area terms)` over
    /// in-sample domains in registry order.
    pub fn pointwise_loglik(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let f = self.forward(x);
        let l = &self.layout;
        let area = match l.lambda_a {
            Some(i) => Self::level_likelihood(&self.data.area_obs, &f.mu_area, &f.slope_area, x[i], None).0.pointwise,
            None => Vec::new(),
        };
        let sub = Self::level_likelihood(&self.data.subarea_obs, &f.mu_subarea, &f.slope_subarea, x[l.lambda_s], None)
            .0
            .pointwise;
        (area, sub)
    }

    /// Log-posterior and its gradient; `grad` is overwritten.
    pub fn log_posterior_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        assert_eq!(x.len(), self.dim(), "parameter vector has wrong length");
        grad.iter_mut().for_each(|g| *g = 0.0);
        let l = &self.layout;
        let f = self.forward(x);
        let mut lp = f.log_prior;

        let d = self.data.n_areas();
        let m = self.data.n_subareas();
        let mut d_eta_area = vec![0.0; d];
        let mut d_eta_sub = vec![0.0; m];
        if let Some(i) = l.lambda_a {
            let (lik, d_raw) =
                Self::level_likelihood(&self.data.area_obs, &f.mu_area, &f.slope_area, x[i], Some(&mut d_eta_area));
            lp += lik.total;
            grad[i] += d_raw + 1.0 - 2.0 * logistic(x[i]);
        }
        let (lik, d_raw) = Self::level_likelihood(
            &self.data.subarea_obs,
            &f.mu_subarea,
            &f.slope_subarea,
            x[l.lambda_s],
            Some(&mut d_eta_sub),
        );
        lp += lik.total;
        grad[l.lambda_s] += d_raw + 1.0 - 2.0 * logistic(x[l.lambda_s]);

        // back through the linear predictors
        let mut d_u = vec![0.0; d];
        let shared = self.variant().shares_area_effect();
        for j in 0..m {
            if shared {
                d_u[self.data.registry.subarea_area[j]] += d_eta_sub[j];
            }
        }
        if let Some(i) = l.alpha_a {
            let alpha = f.alpha_a.unwrap_or_default();
            grad[i] += d_eta_area.iter().sum::<f64>() - alpha / self.spec.prior.intercept_sd.powi(2);
            for (du, de) in d_u.iter_mut().zip(&d_eta_area) {
                *du += de;
            }
        }
        grad[l.alpha_s] += d_eta_sub.iter().sum::<f64>() - f.alpha_s / self.spec.prior.intercept_sd.powi(2);
        if let (Some(b), Some(st)) = (&l.hs_area, &f.hs_area) {
            let d_beta = Self::transpose_dot(&self.data.x_area, &d_eta_area);
            b.backward(x, st, &d_beta, grad);
        }
        if let (Some(b), Some(st)) = (&l.hs_subarea, &f.hs_subarea) {
            let d_beta = Self::transpose_dot(&self.data.x_subarea, &d_eta_sub);
            b.backward(x, st, &d_beta, grad);
        }
        l.u.backward(x, &f.u, &d_u, grad);
        l.v.backward(x, &f.v, &d_eta_sub, grad);
        lp
    }

    fn transpose_dot(x: &DesignMatrix, d_eta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.cols()];
        for (i, de) in d_eta.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(x.row(i)) {
                *o += v * de;
            }
        }
        out
    }

    /// Constrained quantities for one unconstrained vector.
    pub fn derive(&self, x: &[f64]) -> Derived {
        let l = &self.layout;
        let f = self.forward(x);
        let lambda_a = l
            .lambda_a
            .map(|i| Self::level_likelihood(&self.data.area_obs, &f.mu_area, &f.slope_area, x[i], None).0.lambda);
        let lambda_s = Self::level_likelihood(&[], &f.mu_subarea, &f.slope_subarea, x[l.lambda_s], None).0.lambda;
        Derived {
            alpha_a: f.alpha_a,
            alpha_s: f.alpha_s,
            tau_area: f.hs_area.as_ref().map(|s| s.tau),
            tau_subarea: f.hs_subarea.as_ref().map(|s| s.tau),
            beta_area: f.hs_area.map(|s| s.beta).unwrap_or_default(),
            beta_subarea: f.hs_subarea.map(|s| s.beta).unwrap_or_default(),
            sigma_u: f.u.scale,
            sigma_v: f.v.scale,
            u: f.u.values,
            v: f.v.values,
            mu_area: f.mu_area,
            mu_subarea: f.mu_subarea,
            lambda_a,
            lambda_s,
            eta_subarea_fixed: f.eta_subarea_fixed,
        }
    }

    /// Column names of [`Model::constrained_values`].
    pub fn constrained_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.layout.alpha_a.is_some() {
            names.push("alpha_a".to_owned());
        }
        names.push("alpha_s".to_owned());
        if self.layout.hs_area.is_some() {
            names.extend(self.data.x_area.columns.iter().map(|c| format!("beta_a[{c}]")));
            names.push("tau_a".to_owned());
        }
        if self.layout.hs_subarea.is_some() {
            names.extend(self.data.x_subarea.columns.iter().map(|c| format!("beta_s[{c}]")));
            names.push("tau_s".to_owned());
        }
        names.extend(self.data.registry.areas.iter().map(|a| format!("u[{a}]")));
        names.extend(self.data.registry.subareas.iter().map(|s| format!("v[{s}]")));
        names.push("sigma_u".to_owned());
        names.push("sigma_v".to_owned());
        if self.layout.lambda_a.is_some() {
            names.push("lambda_a".to_owned());
        }
        names.push("lambda_s".to_owned());
        names
    }

    pub fn constrained_values(&self, x: &[f64]) -> Vec<f64> {
        let d = self.derive(x);
        let mut out = Vec::new();
        out.extend(d.alpha_a);
        out.push(d.alpha_s);
        if let Some(t) = d.tau_area {
            out.extend(&d.beta_area);
            out.push(t);
        }
        if let Some(t) = d.tau_subarea {
            out.extend(&d.beta_subarea);
            out.push(t);
        }
        out.extend(&d.u);
        out.extend(&d.v);
        out.push(d.sigma_u);
        out.push(d.sigma_v);
        out.extend(d.lambda_a);
        out.push(d.lambda_s);
        out
    }

    /// A fresh sub-area effect from its prior, for out-of-sample prediction.
    pub fn draw_subarea_effect<R: rand::Rng + ?Sized>(&self, rng: &mut R, sigma_v: f64) -> f64 {
        self.layout.v.draw_fresh(rng, sigma_v)
    }

    /// A fresh area effect from its prior.
    pub fn draw_area_effect<R: rand::Rng + ?Sized>(&self, rng: &mut R, sigma_u: f64) -> f64 {
        self.layout.u.draw_fresh(rng, sigma_u)
    }

    /// Number of pointwise likelihood terms at each level.
    pub fn n_observations(&self) -> (usize, usize) {
        let count = |o: &[Option<DomainObs>]| o.iter().flatten().count();
        let area = if self.variant().has_area_level() { count(&self.data.area_obs) } else { 0 };
        (area, count(&self.data.subarea_obs))
    }
}
