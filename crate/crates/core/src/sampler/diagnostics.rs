//! Rank-normalized split R-hat and bulk/tail effective sample sizes.

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamDiagnostics {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    /// `None` when the parameter is constant across all draws.
    pub rhat: Option<f64>,
    pub ess_bulk: Option<f64>,
    pub ess_tail: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Halve each chain, dropping the middle draw of odd-length chains.
pub fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let half = c.len() / 2;
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

/// Average ranks (1-based) of all pooled draws, mapped through the normal
/// quantile function with the Blom offset.
pub fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    let s = pooled.len();
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]));
    let mut ranks = vec![0.0; s];
    let mut i = 0;
    while i < s {
        let mut j = i;
        while j + 1 < s && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    let normal = Normal::standard();
    let mut it = ranks.into_iter().map(|r| normal.inverse_cdf((r - 0.375) / (s as f64 + 0.25)));
    chains.iter().map(|c| (0..c.len()).map(|_| it.next().unwrap_or_default()).collect()).collect()
}

/// Classic potential scale reduction over the given chains.
pub fn rhat_basic(chains: &[Vec<f64>]) -> f64 {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let within = mean(&chains.iter().map(|c| sample_var(c)).collect::<Vec<_>>());
    let between = n * sample_var(&means);
    ((between / within + n - 1.0) / n).sqrt()
}

/// Biased autocovariances `acov[t] = sum (x_i - m)(x_{i+t} - m) / n` via FFT.
fn autocovariance(x: &[f64], planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let n = x.len();
    let size = (2 * n).next_power_of_two();
    let m = mean(x);
    let mut buf: Vec<Complex<f64>> = x
        .iter()
        .map(|v| Complex::new(v - m, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    planner.plan_fft_forward(size).process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(size).process(&mut buf);
    buf.iter().take(n).map(|c| c.re / size as f64 / n as f64).collect()
}

/// Effective sample size of the pooled chains with Geyer's initial monotone
/// sequence estimator.
pub fn ess(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains[0].len();
    if n < 4 {
        return f64::NAN;
    }
    let mut planner = FftPlanner::new();
    let acov: Vec<Vec<f64>> = chains.iter().map(|c| autocovariance(c, &mut planner)).collect();
    let nf = n as f64;
    let chain_mean: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let mean_var = acov.iter().map(|a| a[0] * nf / (nf - 1.0)).sum::<f64>() / m as f64;
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        var_plus += sample_var(&chain_mean);
    }
    let acov_mean = |t: usize| acov.iter().map(|a| a[t]).sum::<f64>() / m as f64;
    let rho_at = |t: usize| 1.0 - (mean_var - acov_mean(t)) / var_plus;

    let mut rho = vec![0.0; n];
    rho[0] = 1.0;
    let mut even = 1.0;
    let mut odd = rho_at(1);
    rho[1] = odd;
    let mut t = 0;
    while t + 5 < n && (even + odd) > 0.0 {
        t += 2;
        even = rho_at(t);
        odd = rho_at(t + 1);
        if even + odd >= 0.0 {
            rho[t] = even;
            rho[t + 1] = odd;
        }
    }
    let max_t = t;
    if even > 0.0 {
        rho[max_t] = even;
    }
    // initial monotone sequence
    let mut t = 0;
    while t + 4 <= max_t {
        t += 2;
        if rho[t] + rho[t + 1] > rho[t - 2] + rho[t - 1] {
            let v = (rho[t - 2] + rho[t - 1]) / 2.0;
            rho[t] = v;
            rho[t + 1] = v;
        }
    }
    let total = (m * n) as f64;
    let tau = -1.0 + 2.0 * rho[..max_t].iter().sum::<f64>() + rho[max_t];
    total / tau.max(1.0 / total.log10())
}

fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn ess_quantile(chains: &[Vec<f64>], sorted: &[f64], p: f64) -> f64 {
    let q = quantile_sorted(sorted, p);
    let ind: Vec<Vec<f64>> = chains.iter().map(|c| c.iter().map(|&v| f64::from(u8::from(v <= q))).collect()).collect();
    let split = split_chains(&ind);
    let first = split[0][0];
    if split.iter().flatten().all(|&v| v == first) {
        return f64::NAN;
    }
    ess(&split)
}

/// R-hat, bulk ESS and tail ESS of one parameter.
pub fn summarize(name: &str, chains: &[Vec<f64>]) -> ParamDiagnostics {
    let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    let mean_v = mean(&pooled);
    let sd = if pooled.len() > 1 { sample_var(&pooled).sqrt() } else { f64::NAN };
    let base = ParamDiagnostics {
        name: name.to_owned(),
        mean: mean_v,
        sd,
        rhat: None,
        ess_bulk: None,
        ess_tail: None,
        note: None,
    };
    if pooled.iter().all(|v| *v == pooled[0]) {
        return ParamDiagnostics { note: Some("constant across draws".into()), ..base };
    }
    if chains.iter().any(|c| c.len() < 4) {
        return ParamDiagnostics { note: Some("too few draws".into()), ..base };
    }
    let split = split_chains(chains);
    let z = rank_normalize(&split);
    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let median = quantile_sorted(&sorted, 0.5);
    let folded: Vec<Vec<f64>> = split.iter().map(|c| c.iter().map(|v| (v - median).abs()).collect()).collect();
    let rhat_bulk = rhat_basic(&z);
    let rhat_tail = rhat_basic(&rank_normalize(&folded));
    let tail = ess_quantile(chains, &sorted, 0.05).min(ess_quantile(chains, &sorted, 0.95));
    let finite = |v: f64| v.is_finite().then_some(v);
    ParamDiagnostics {
        rhat: finite(rhat_bulk.max(rhat_tail)),
        ess_bulk: finite(ess(&z)),
        ess_tail: finite(tail),
        ..base
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn iid(chains: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..chains).map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).collect()
    }

    #[test]
    fn identical_iid_chains() {
        let one = iid(1, 2000, 1).remove(0);
        let chains = vec![one.clone(), one.clone(), one.clone(), one];
        let d = summarize("x", &chains);
        assert!((d.rhat.unwrap() - 1.0).abs() < 0.01, "{:?}", d.rhat);
    }

    #[test]
    fn offset_chains_have_large_rhat() {
        let mut chains = iid(4, 1000, 2);
        chains[0].iter_mut().for_each(|v| *v += 5.0);
        chains[1].iter_mut().for_each(|v| *v += 5.0);
        assert!(summarize("x", &chains).rhat.unwrap() > 1.5);
    }

    #[test]
    fn iid_ess_near_nominal() {
        let chains = iid(4, 1000, 3);
        let d = summarize("x", &chains);
        for e in [d.ess_bulk.unwrap(), d.ess_tail.unwrap()] {
            assert!((e / 4000.0 - 1.0).abs() < 0.2, "{e}");
        }
    }

    #[test]
    fn ar1_ess_matches_theory() {
        // AR(1) with coefficient a has ESS ratio (1 - a) / (1 + a)
        let a = 0.8;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut x = 0.0;
                (0..20_000)
                    .map(|_| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        x = a * x + (1.0 - a * a as f64).sqrt() * e;
                        x
                    })
                    .collect()
            })
            .collect();
        let e = ess(&chains) / 80_000.0;
        let expected = (1.0 - a) / (1.0 + a);
        assert!((e / expected - 1.0).abs() < 0.15, "{e} vs {expected}");
    }

    #[test]
    fn autocovariance_matches_direct_sum() {
        let x = iid(1, 37, 5).remove(0);
        let mut planner = FftPlanner::new();
        let acov = autocovariance(&x, &mut planner);
        let m = mean(&x);
        for t in [0, 1, 5, 36] {
            let direct: f64 = (0..37 - t).map(|i| (x[i] - m) * (x[i + t] - m)).sum::<f64>() / 37.0;
            assert!((acov[t] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_parameter_sentinel() {
        let d = summarize("c", &[vec![1.0; 10], vec![1.0; 10]]);
        assert!(d.rhat.is_none() && d.ess_bulk.is_none());
        assert!(d.note.unwrap().contains("constant"));
    }

    #[test]
    fn ranks_average_ties() {
        let z = rank_normalize(&[vec![1.0, 2.0, 2.0, 3.0]]);
        assert_eq!(z[0][1], z[0][2]);
        assert!(z[0][0] < z[0][1] && z[0][2] < z[0][3]);
        assert!((z[0][0] + z[0][3]).abs() < 1e-12);
    }
}
