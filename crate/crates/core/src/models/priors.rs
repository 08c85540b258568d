//! Prior blocks with hand-written reverse passes.
//!
//! Each block reads its slice of the unconstrained parameter vector,
//! produces constrained values plus its log-prior (Jacobians included), and
//! accumulates gradients given the adjoint of its outputs.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HorseshoeConfig {
    pub expected_nonzero: f64,
    pub slab_scale: f64,
    pub slab_df: f64,
}

impl Default for HorseshoeConfig {
    fn default() -> Self {
        Self { expected_nonzero: 5.0, slab_scale: 2.0, slab_df: 4.0 }
    }
}

impl HorseshoeConfig {
    /// Global scale `p0 / ((P - p0) sqrt(n_eff))`. The guess `p0` is capped at
    /// half the number of columns so the ratio stays positive for small `P`.
    pub fn global_scale(&self, n_columns: usize, mean_effective_size: f64) -> f64 {
        let p = n_columns as f64;
        let p0 = self.expected_nonzero.min(p / 2.0);
        p0 / ((p - p0) * mean_effective_size.max(1.0).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GammaConfig {
    pub shape: f64,
    pub rate: f64,
}

impl Default for GammaConfig {
    fn default() -> Self {
        Self { shape: 1.0, rate: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub horseshoe: HorseshoeConfig,
    /// Mixing distribution of the per-effect variances.
    pub reff_gamma: GammaConfig,
    /// Half-normal scale of the random-effect standard deviations.
    pub reff_scale_sd: f64,
    /// Normal scale of the intercepts.
    pub intercept_sd: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            horseshoe: HorseshoeConfig::default(),
            reff_gamma: GammaConfig::default(),
            reff_scale_sd: 1.0,
            intercept_sd: 5.0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let hs = &self.horseshoe;
        let all = [
            hs.expected_nonzero,
            hs.slab_scale,
            hs.slab_df,
            self.reff_gamma.shape,
            self.reff_gamma.rate,
            self.reff_scale_sd,
            self.intercept_sd,
        ];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(crate::Error::input("all prior hyperparameters must be positive"))
        }
    }
}

pub(crate) fn normal_logpdf(x: f64, sd: f64) -> f64 {
    -0.5 * (x / sd).powi(2) - sd.ln() - LN_SQRT_2PI
}

/// Regularized horseshoe over `p` coefficients, non-centered:
/// `beta_k = z_k * tau * lambda_tilde_k` with
/// `lambda_tilde_k^2 = c^2 lambda_k^2 / (c^2 + tau^2 lambda_k^2)`.
///
/// Layout: `z[p]`, `log lambda[p]`, `log tau`, `log c^2`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct HorseshoeBlock {
    pub start: usize,
    pub p: usize,
    pub tau0: f64,
    pub slab_scale: f64,
    pub slab_df: f64,
}

pub(crate) struct HorseshoeState {
    pub beta: Vec<f64>,
    pub tau: f64,
    pub c2: f64,
    weight: Vec<f64>,
    local: Vec<f64>,
    z_scale: Vec<f64>,
}

impl HorseshoeBlock {
    pub fn len(&self) -> usize {
        2 * self.p + 2
    }

    fn z(&self, k: usize) -> usize {
        self.start + k
    }

    fn log_local(&self, k: usize) -> usize {
        self.start + self.p + k
    }

    fn log_tau(&self) -> usize {
        self.start + 2 * self.p
    }

    fn log_c2(&self) -> usize {
        self.start + 2 * self.p + 1
    }

    pub fn names(&self, prefix: &str, columns: &[String]) -> Vec<String> {
        let mut out = Vec::with_capacity(self.len());
        out.extend(columns.iter().map(|c| format!("{prefix}.z[{c}]")));
        out.extend(columns.iter().map(|c| format!("{prefix}.log_local[{c}]")));
        out.push(format!("{prefix}.log_tau"));
        out.push(format!("{prefix}.log_c2"));
        out
    }

    pub fn forward(&self, x: &[f64]) -> (HorseshoeState, f64) {
        let tau = x[self.log_tau()].exp();
        let c2 = x[self.log_c2()].exp();
        let mut beta = Vec::with_capacity(self.p);
        let mut weight = Vec::with_capacity(self.p);
        let mut local = Vec::with_capacity(self.p);
        let mut z_scale = Vec::with_capacity(self.p);
        let mut lp = 0.0;
        for k in 0..self.p {
            let z = x[self.z(k)];
            let ll = x[self.log_local(k)];
            let lam = ll.exp();
            let tl2 = (tau * lam).powi(2);
            let w = tl2 / (c2 + tl2);
            let lam_tilde = (c2 * lam * lam / (c2 + tl2)).sqrt();
            let scale = tau * lam_tilde;
            beta.push(z * scale);
            weight.push(w);
            local.push(lam);
            z_scale.push(scale);
            lp += normal_logpdf(z, 1.0);
            // half-Cauchy(0, 1) on lambda, log Jacobian ll
            lp += (2.0 / PI).ln() - (lam * lam).ln_1p() + ll;
        }
        let r = tau / self.tau0;
        lp += (2.0 / (PI * self.tau0)).ln() - (r * r).ln_1p() + x[self.log_tau()];
        let (a, b) = self.inv_gamma();
        let lc = x[self.log_c2()];
        lp += a * b.ln() - ln_gamma(a) - (a + 1.0) * lc - b / c2 + lc;
        (HorseshoeState { beta, tau, c2, weight, local, z_scale }, lp)
    }

    fn inv_gamma(&self) -> (f64, f64) {
        let a = 0.5 * self.slab_df;
        (a, a * self.slab_scale * self.slab_scale)
    }

    /// Accumulate prior gradients plus the chain rule through `beta`.
    pub fn backward(&self, x: &[f64], st: &HorseshoeState, d_beta: &[f64], grad: &mut [f64]) {
        let mut d_log_tau = 0.0;
        let mut d_log_c2 = 0.0;
        for k in 0..self.p {
            let db = d_beta[k];
            let b = st.beta[k];
            let w = st.weight[k];
            grad[self.z(k)] += db * st.z_scale[k] - x[self.z(k)];
            let lam2 = st.local[k] * st.local[k];
            grad[self.log_local(k)] += db * b * (1.0 - w) - 2.0 * lam2 / (1.0 + lam2) + 1.0;
            d_log_tau += db * b * (1.0 - w);
            d_log_c2 += 0.5 * db * b * w;
        }
        let r2 = (st.tau / self.tau0).powi(2);
        grad[self.log_tau()] += d_log_tau - 2.0 * r2 / (1.0 + r2) + 1.0;
        let (a, b) = self.inv_gamma();
        grad[self.log_c2()] += d_log_c2 - a + b / st.c2;
    }
}

/// Normal random effects with gamma-mixed variances, non-centered:
/// `value_k = s * sqrt(xi_k) * z_k`, `xi_k ~ Gamma(shape, rate)`,
/// `s ~ HalfNormal(scale_sd)`.
///
/// Layout: `z[n]`, `log xi[n]`, `log s`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct EffectBlock {
    pub start: usize,
    pub n: usize,
    pub shape: f64,
    pub rate: f64,
    pub scale_sd: f64,
}

pub(crate) struct EffectState {
    pub values: Vec<f64>,
    pub scale: f64,
    z_scale: Vec<f64>,
    xi: Vec<f64>,
}

impl EffectBlock {
    pub fn len(&self) -> usize {
        2 * self.n + 1
    }

    fn z(&self, k: usize) -> usize {
        self.start + k
    }

    fn log_xi(&self, k: usize) -> usize {
        self.start + self.n + k
    }

    pub fn log_scale(&self) -> usize {
        self.start + 2 * self.n
    }

    pub fn names(&self, prefix: &str, ids: &[String]) -> Vec<String> {
        let mut out = Vec::with_capacity(self.len());
        out.extend(ids.iter().map(|c| format!("{prefix}.z[{c}]")));
        out.extend(ids.iter().map(|c| format!("{prefix}.log_xi[{c}]")));
        out.push(format!("{prefix}.log_scale"));
        out
    }

    pub fn forward(&self, x: &[f64]) -> (EffectState, f64) {
        let ls = x[self.log_scale()];
        let s = ls.exp();
        let mut values = Vec::with_capacity(self.n);
        let mut z_scale = Vec::with_capacity(self.n);
        let mut xi_v = Vec::with_capacity(self.n);
        let mut lp = 0.0;
        let gamma_norm = self.shape * self.rate.ln() - ln_gamma(self.shape);
        for k in 0..self.n {
            let z = x[self.z(k)];
            let lxi = x[self.log_xi(k)];
            let xi = lxi.exp();
            let sc = s * xi.sqrt();
            values.push(sc * z);
            z_scale.push(sc);
            xi_v.push(xi);
            lp += normal_logpdf(z, 1.0);
            lp += gamma_norm + self.shape * lxi - self.rate * xi;
        }
        lp += std::f64::consts::LN_2 + normal_logpdf(s, self.scale_sd) + ls;
        (EffectState { values, scale: s, z_scale, xi: xi_v }, lp)
    }

    pub fn backward(&self, x: &[f64], st: &EffectState, d_values: &[f64], grad: &mut [f64]) {
        let mut d_log_scale = 0.0;
        for k in 0..self.n {
            let dv = d_values[k];
            let v = st.values[k];
            grad[self.z(k)] += dv * st.z_scale[k] - x[self.z(k)];
            grad[self.log_xi(k)] += 0.5 * dv * v + self.shape - self.rate * st.xi[k];
            d_log_scale += dv * v;
        }
        let s = st.scale;
        grad[self.log_scale()] += d_log_scale - (s / self.scale_sd).powi(2) + 1.0;
    }

    /// One draw of a fresh effect from the prior given the scale `s`.
    pub fn draw_fresh<R: rand::Rng + ?Sized>(&self, rng: &mut R, scale: f64) -> f64 {
        use rand_distr::{Distribution, Gamma, StandardNormal};
        let xi: f64 = Gamma::new(self.shape, 1.0 / self.rate).expect("valid gamma").sample(rng);
        let z: f64 = StandardNormal.sample(rng);
        scale * xi.sqrt() * z
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn check_block<F, G>(dim: usize, forward: F, backward: G, seed: u64)
    where
        F: Fn(&[f64]) -> (Vec<f64>, f64),
        G: Fn(&[f64], &[f64], &mut [f64]),
    {
        // objective: lp + sum_k c_k * out_k for a fixed random adjoint c
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10 {
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
            let (out0, _) = forward(&x);
            let c: Vec<f64> = (0..out0.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let obj = |x: &[f64]| {
                let (o, lp) = forward(x);
                lp + o.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>()
            };
            let mut grad = vec![0.0; dim];
            backward(&x, &c, &mut grad);
            for i in 0..dim {
                let h = 1e-6;
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (obj(&xp) - obj(&xm)) / (2.0 * h);
                assert!((fd - grad[i]).abs() < 1e-6 * fd.abs().max(1.0), "coord {i}: {} vs {fd}", grad[i]);
            }
        }
    }

    #[test]
    fn horseshoe_gradient() {
        let block = HorseshoeBlock { start: 0, p: 3, tau0: 0.3, slab_scale: 2.0, slab_df: 4.0 };
        check_block(
            block.len(),
            |x| {
                let (s, lp) = block.forward(x);
                (s.beta, lp)
            },
            |x, c, g| {
                let (s, _) = block.forward(x);
                block.backward(x, &s, c, g)
            },
            1,
        );
    }

    #[test]
    fn effect_block_gradient() {
        let block = EffectBlock { start: 0, n: 4, shape: 1.5, rate: 0.7, scale_sd: 1.0 };
        check_block(
            block.len(),
            |x| {
                let (s, lp) = block.forward(x);
                (s.values, lp)
            },
            |x, c, g| {
                let (s, _) = block.forward(x);
                block.backward(x, &s, c, g)
            },
            2,
        );
    }

    #[test]
    fn global_scale_default() {
        let hs = HorseshoeConfig::default();
        // P = 20, p0 = 5, n_eff = 16 -> 5 / (15 * 4)
        assert!((hs.global_scale(20, 16.0) - 5.0 / 60.0).abs() < 1e-15);
        // small P caps p0 at P / 2
        assert!((hs.global_scale(3, 4.0) - 0.5).abs() < 1e-15);
    }
}
