//! Extended Beta likelihood kernel.
//!
//! A direct estimate is modelled as a mixture of point masses at 0 and 1
//! and a mean-precision Beta component on the open interval. The point
//! masses are censoring probabilities derived from an exchangeable
//! within-domain correlation `lambda` and the domain's unit count `m`:
//!
//! ```text
//! pi1 = mu * lambda^(m-1)
//! pi0 = (1 + mu (lambda - 2))^(m-1) / (1 - mu)^(m-2)
//! ```
//!
//! `pi0` is evaluated in log space; `m` reaches the hundreds for large
//! domains. Domains with `m = 1` degenerate to a single Bernoulli draw.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};

/// Lower clip applied to the Beta precision `phi = n_eff - 1`.
pub const MIN_PHI: f64 = 1e-6;

/// Slack allowed when checking `lambda` against its lower bound.
const LAMBDA_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CensorProbs {
    pub pi0: f64,
    pub pi1: f64,
    pub log_pi0: f64,
    pub log_pi1: f64,
}

impl CensorProbs {
    /// Mass of the continuous Beta component.
    pub fn interior(&self) -> f64 {
        (1.0 - self.pi0 - self.pi1).max(0.0)
    }
}

/// Extended Beta parameters for one domain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EbParams {
    pub mu: f64,
    pub phi: f64,
    pub lambda: f64,
    pub m: u32,
    pub pi0: f64,
    pub pi1: f64,
}

impl EbParams {
    pub fn new(mu: f64, phi: f64, lambda: f64, m: u32) -> Result<Self> {
        if !(phi.is_finite() && phi > 0.0) {
            return Err(Error::domain(format!("phi must be positive, got {phi}")));
        }
        let p = censor_probs(mu, lambda, m)?;
        Ok(Self { mu, phi, lambda, m, pi0: p.pi0, pi1: p.pi1 })
    }

    /// `phi` from an effective sample size, `n_eff - 1` clipped at [`MIN_PHI`].
    pub fn phi_from_effective_size(n_eff: f64) -> f64 {
        (n_eff - 1.0).max(MIN_PHI)
    }
}

/// `max{0, max_k (2 mu_k - 1) / mu_k}`: smallest correlation keeping every
/// domain's `pi0` bracket nonnegative.
pub fn lambda_lower_bound(mus: &[f64]) -> f64 {
    mus.iter().fold(0.0_f64, |acc, &mu| acc.max((2.0 * mu - 1.0) / mu))
}

fn check_mu(mu: f64) -> Result<()> {
    if mu > 0.0 && mu < 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("mu must lie in (0, 1), got {mu}")))
    }
}

pub fn censor_probs(mu: f64, lambda: f64, m: u32) -> Result<CensorProbs> {
    check_mu(mu)?;
    if m == 0 {
        return Err(Error::domain("censor exponent m must be at least 1"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::domain(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let lower = lambda_lower_bound(&[mu]);
    if lambda < lower - LAMBDA_SLACK {
        return Err(Error::domain(format!(
            "infeasible correlation: lambda = {lambda} is below the bound {lower} implied by mu = {mu}"
        )));
    }
    Ok(log_censor_probs(mu, lambda, m))
}

/// Unchecked evaluation used on hot paths.
pub(crate) fn log_censor_probs(mu: f64, lambda: f64, m: u32) -> CensorProbs {
    if m == 1 {
        return CensorProbs { pi0: 1.0 - mu, pi1: mu, log_pi0: (-mu).ln_1p(), log_pi1: mu.ln() };
    }
    if lambda == 1.0 {
        // perfect correlation: the domain is all-poor or all-non-poor
        return log_censor_probs(mu, 1.0, 1);
    }
    let e = f64::from(m - 1);
    let log_pi1 = mu.ln() + e * lambda.ln();
    let bracket = (1.0 + mu * (lambda - 2.0)).max(0.0);
    let log_pi0 = e * bracket.ln() - (e - 1.0) * (-mu).ln_1p();
    CensorProbs { pi0: log_pi0.exp(), pi1: log_pi1.exp(), log_pi0, log_pi1 }
}

/// Log density of Beta(mu phi, (1 - mu) phi) at an interior point.
pub fn beta_logpdf(y: f64, mu: f64, phi: f64) -> Result<f64> {
    if !(y > 0.0 && y < 1.0) {
        return Err(Error::domain(format!("beta density needs y in (0, 1), got {y}")));
    }
    check_mu(mu)?;
    if !(phi.is_finite() && phi > 0.0) {
        return Err(Error::domain(format!("phi must be positive, got {phi}")));
    }
    Ok(beta_logpdf_unchecked(y, mu, phi))
}

fn beta_logpdf_unchecked(y: f64, mu: f64, phi: f64) -> f64 {
    let a = mu * phi;
    let b = (1.0 - mu) * phi;
    ln_gamma(phi) - ln_gamma(a) - ln_gamma(b) + (a - 1.0) * y.ln() + (b - 1.0) * (-y).ln_1p()
}

/// Extended Beta log-likelihood of an observed direct estimate in `[0, 1]`.
pub fn eb_loglik(y: f64, params: &EbParams) -> Result<f64> {
    if !(0.0..=1.0).contains(&y) {
        return Err(Error::domain(format!("observation must lie in [0, 1], got {y}")));
    }
    Ok(eb_loglik_grad(y, params.mu, params.lambda, params.m, params.phi).value)
}

/// Log-likelihood value with its partial derivatives in `mu` and `lambda`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct EbTerm {
    pub value: f64,
    pub d_mu: f64,
    pub d_lambda: f64,
}

/// `(m - 1) mu lambda^(m-2)`, i.e. `pi1 * d log pi1 / d lambda`, safe at lambda = 0.
fn pi1_dlambda(mu: f64, lambda: f64, m: u32) -> f64 {
    let e = f64::from(m - 1);
    if m == 2 {
        mu
    } else if lambda == 0.0 {
        0.0
    } else {
        e * (mu.ln() + (e - 1.0) * lambda.ln()).exp()
    }
}

pub(crate) fn eb_loglik_grad(y: f64, mu: f64, lambda: f64, m: u32, phi: f64) -> EbTerm {
    if m == 1 {
        return match y {
            _ if y == 0.0 => EbTerm { value: (-mu).ln_1p(), d_mu: -1.0 / (1.0 - mu), d_lambda: 0.0 },
            _ if y == 1.0 => EbTerm { value: mu.ln(), d_mu: 1.0 / mu, d_lambda: 0.0 },
            _ => EbTerm { value: f64::NEG_INFINITY, d_mu: 0.0, d_lambda: 0.0 },
        };
    }
    let e = f64::from(m - 1);
    let bracket = (1.0 + mu * (lambda - 2.0)).max(f64::MIN_POSITIVE);
    let one_m_mu = 1.0 - mu;
    if y == 1.0 {
        return EbTerm { value: mu.ln() + e * lambda.ln(), d_mu: 1.0 / mu, d_lambda: e / lambda };
    }
    // d log pi0 / d mu and d lambda
    let a0 = e * (lambda - 2.0) / bracket + (e - 1.0) / one_m_mu;
    let b0 = e * mu / bracket;
    if y == 0.0 {
        let value = e * bracket.ln() - (e - 1.0) * one_m_mu.ln();
        return EbTerm { value, d_mu: a0, d_lambda: b0 };
    }
    let p = log_censor_probs(mu, lambda, m);
    let interior = 1.0 - p.pi0 - p.pi1;
    if interior <= 0.0 {
        // the interior mass underflowed; keep the density finite and flat
        return EbTerm { value: f64::MIN_POSITIVE.ln() + beta_logpdf_unchecked(y, mu, phi), d_mu: 0.0, d_lambda: 0.0 };
    }
    // pi0 / bracket without dividing by a vanishing bracket
    let pi0_over_bracket = ((e - 1.0) * (bracket.ln() - one_m_mu.ln())).exp();
    let pi0_dmu = e * (lambda - 2.0) * pi0_over_bracket + (e - 1.0) * p.pi0 / one_m_mu;
    let pi0_dlambda = e * mu * pi0_over_bracket;
    let pi1_dmu = p.pi1 / mu;
    let pi1_dl = pi1_dlambda(mu, lambda, m);
    let mix_value = interior.ln();
    let mix_dmu = -(pi0_dmu + pi1_dmu) / interior;
    let mix_dlambda = -(pi0_dlambda + pi1_dl) / interior;

    let a = mu * phi;
    let b = one_m_mu * phi;
    let ly = y.ln();
    let l1y = (-y).ln_1p();
    let beta = beta_logpdf_unchecked(y, mu, phi);
    let beta_dmu = phi * (digamma(b) - digamma(a) + ly - l1y);
    EbTerm { value: mix_value + beta, d_mu: mix_dmu + beta_dmu, d_lambda: mix_dlambda }
}

/// Population proportion implied by the mixture: `(1 - pi0 - pi1) mu + pi1`.
pub fn theta_functional(mu: f64, lambda: f64, m: u32) -> Result<f64> {
    let p = censor_probs(mu, lambda, m)?;
    Ok(theta_from_probs(mu, lambda, &p))
}

pub(crate) fn theta_unchecked(mu: f64, lambda: f64, m: u32) -> f64 {
    theta_from_probs(mu, lambda, &log_censor_probs(mu, lambda, m))
}

fn theta_from_probs(mu: f64, lambda: f64, p: &CensorProbs) -> f64 {
    if lambda == 1.0 {
        return mu;
    }
    p.interior() * mu + p.pi1
}

/// Draw one observation from the Extended Beta mixture.
pub fn sample_eb<R: Rng + ?Sized>(rng: &mut R, params: &EbParams) -> f64 {
    let u: f64 = rng.random();
    if u < params.pi0 {
        0.0
    } else if u < params.pi0 + params.pi1 {
        1.0
    } else {
        Beta::new(params.mu * params.phi, (1.0 - params.mu) * params.phi).expect("valid beta shapes").sample(rng)
    }
}
