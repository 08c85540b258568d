//! Pareto-smoothed importance-sampling leave-one-out cross-validation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pareto shape above which an observation's LOO estimate is unreliable.
pub const K_THRESHOLD: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LooResult {
    pub elpd_loo: f64,
    pub elpd_se: f64,
    pub looic: f64,
    pub looic_se: f64,
    pub pointwise_elpd: Vec<f64>,
    pub pareto_k: Vec<f64>,
    /// Observations with `k > 0.7`.
    pub flagged: Vec<usize>,
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Generalized Pareto fit by the empirical-Bayes method of Zhang and
/// Stephens, with the weakly informative shrinkage of `k` towards 0.5.
/// `x` must be sorted ascending and positive. Returns `(k, sigma)`.
pub fn gpd_fit(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    let prior = 3.0;
    let m = 30 + (n as f64).sqrt() as usize;
    let xstar = x[((n as f64) / 4.0 + 0.5).floor() as usize - 1];
    let xmax = x[n - 1];
    let theta: Vec<f64> =
        (1..=m).map(|j| 1.0 / xmax + (1.0 - (m as f64 / (j as f64 - 0.5)).sqrt()) / prior / xstar).collect();
    let l_theta: Vec<f64> = theta
        .iter()
        .map(|&t| {
            let a = -t;
            let k = x.iter().map(|&v| (a * v).ln_1p()).sum::<f64>() / n as f64;
            n as f64 * ((a / k).ln() - k - 1.0)
        })
        .collect();
    let lse = log_sum_exp(&l_theta);
    let theta_hat: f64 = theta.iter().zip(&l_theta).map(|(t, l)| t * (l - lse).exp()).sum();
    let mut k = x.iter().map(|&v| (-theta_hat * v).ln_1p()).sum::<f64>() / n as f64;
    let sigma = -k / theta_hat;
    let nf = n as f64;
    k = k * nf / (nf + 10.0) + 10.0 * 0.5 / (nf + 10.0);
    if k.is_nan() {
        k = f64::INFINITY;
    }
    (k, sigma)
}

fn gpd_quantile(p: f64, k: f64, sigma: f64) -> f64 {
    sigma * (-k * (-p).ln_1p()).exp_m1() / k
}

/// Smoothed, truncated log-weights of one observation and the Pareto `k`.
pub fn psis(log_ratios: &[f64]) -> (Vec<f64>, f64) {
    let s = log_ratios.len();
    let max_lr = log_ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut lw: Vec<f64> = log_ratios.iter().map(|v| v - max_lr).collect();
    let tail_len = (0.2 * s as f64).min(3.0 * (s as f64).sqrt()).ceil() as usize;
    let mut khat = f64::INFINITY;
    if tail_len >= 5 && tail_len < s {
        let mut order: Vec<usize> = (0..s).collect();
        order.sort_by(|&a, &b| lw[a].total_cmp(&lw[b]));
        let tail_ids = &order[s - tail_len..];
        let tail: Vec<f64> = tail_ids.iter().map(|&i| lw[i]).collect();
        if (tail[tail_len - 1] - tail[0]).abs() >= f64::EPSILON / 100.0 {
            let cutoff = lw[order[s - tail_len - 1]];
            let exp_cut = cutoff.exp();
            let excess: Vec<f64> = tail.iter().map(|v| v.exp() - exp_cut).collect();
            let (k, sigma) = gpd_fit(&excess);
            khat = k;
            if k.is_finite() && sigma > 0.0 {
                for (r, &i) in tail_ids.iter().enumerate() {
                    let p = (r as f64 + 0.5) / tail_len as f64;
                    lw[i] = (gpd_quantile(p, k, sigma) + exp_cut).ln();
                }
            }
        }
    }
    for v in lw.iter_mut() {
        if *v > 0.0 {
            *v = 0.0;
        }
    }
    (lw.into_iter().map(|v| v + max_lr).collect(), khat)
}

/// LOO information criterion from a `[draw][observation]` log-likelihood matrix.
pub fn looic(loglik: &[Vec<f64>]) -> Result<LooResult> {
    let s = loglik.len();
    if s < 2 {
        return Err(Error::input("LOO needs at least two draws"));
    }
    let n = loglik[0].len();
    if n == 0 {
        return Err(Error::input("LOO needs at least one observation"));
    }
    if loglik.iter().any(|r| r.len() != n || r.iter().any(|v| !v.is_finite())) {
        return Err(Error::input("log-likelihood matrix must be rectangular and finite"));
    }
    let per_obs: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let ll: Vec<f64> = loglik.iter().map(|r| r[i]).collect();
            let ratios: Vec<f64> = ll.iter().map(|v| -v).collect();
            let (lw, k) = psis(&ratios);
            let norm = log_sum_exp(&lw);
            let terms: Vec<f64> = lw.iter().zip(&ll).map(|(w, l)| w - norm + l).collect();
            (log_sum_exp(&terms), k)
        })
        .collect();
    let pointwise_elpd: Vec<f64> = per_obs.iter().map(|p| p.0).collect();
    let pareto_k: Vec<f64> = per_obs.iter().map(|p| p.1).collect();
    let elpd_loo: f64 = pointwise_elpd.iter().sum();
    let nf = n as f64;
    let elpd_se = if n > 1 {
        let m = elpd_loo / nf;
        let var = pointwise_elpd.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (nf - 1.0);
        (nf * var).sqrt()
    } else {
        0.0
    };
    let flagged = pareto_k.iter().enumerate().filter(|(_, k)| **k > K_THRESHOLD).map(|(i, _)| i).collect();
    Ok(LooResult {
        elpd_loo,
        elpd_se,
        looic: -2.0 * elpd_loo,
        looic_se: 2.0 * elpd_se,
        pointwise_elpd,
        pareto_k,
        flagged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Exp, Normal, StandardNormal};

    fn normal_ll(y: f64, mu: f64, sd: f64) -> f64 {
        -0.5 * ((y - mu) / sd).powi(2) - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    }

    #[test]
    fn identical_matrices_identical_looic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let m: Vec<Vec<f64>> = (0..500)
            .map(|_| {
                (0..8)
                    .map(|_| {
                        -1.0 + 0.3 * {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            z
                        }
                    })
                    .collect()
            })
            .collect();
        assert_eq!(looic(&m).unwrap(), looic(&m.clone()).unwrap());
    }

    #[test]
    fn true_model_has_lower_looic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let y: Vec<f64> = (0..50).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = y.len() as f64;
        let ybar = y.iter().sum::<f64>() / n;
        // posterior of the mean under a flat prior and known sd
        let post = |sd: f64, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<f64>> {
            let d = Normal::new(ybar, sd / n.sqrt()).unwrap();
            (0..2000)
                .map(|_| {
                    let mu = d.sample(rng);
                    y.iter().map(|&v| normal_ll(v, mu, sd)).collect()
                })
                .collect()
        };
        let good = looic(&post(1.0, &mut rng)).unwrap();
        let bad = looic(&post(3.0, &mut rng)).unwrap();
        assert!(good.looic < bad.looic, "{} vs {}", good.looic, bad.looic);
        assert!(good.flagged.is_empty());
    }

    #[test]
    fn single_observation_matches_plain_is() {
        // well-behaved weights: smoothing barely moves the estimate
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let ll: Vec<Vec<f64>> = (0..4000)
            .map(|_| {
                vec![
                    -1.0 + 0.05 * {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z
                    },
                ]
            })
            .collect();
        let r = looic(&ll).unwrap();
        // plain IS: elpd = -log mean exp(-ll)
        let lse = log_sum_exp(&ll.iter().map(|r| -r[0]).collect::<Vec<_>>());
        let plain = -(lse - (ll.len() as f64).ln());
        assert!((r.elpd_loo - plain).abs() < 1e-3, "{} vs {plain}", r.elpd_loo);
        assert!((r.looic + 2.0 * plain).abs() < 2e-3);
        assert_eq!(r.looic_se, 0.0);
    }

    #[test]
    fn gpd_recovers_shape() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for k in [0.2, 0.5, 0.9] {
            // GPD via inverse CDF of uniform draws
            let mut x: Vec<f64> = (0..5000)
                .map(|_| {
                    let u: f64 = 1.0 - (-Exp::new(1.0).unwrap().sample(&mut rng) as f64).exp();
                    gpd_quantile(u, k, 1.0)
                })
                .collect();
            x.sort_by(f64::total_cmp);
            let (khat, sigma) = gpd_fit(&x);
            assert!((khat - k).abs() < 0.08, "{khat} vs {k}");
            assert!((sigma - 1.0).abs() < 0.15, "{sigma}");
        }
    }

    #[test]
    fn heavy_tails_are_flagged() {
        // ratios with a Pareto(0.9) tail
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let ll: Vec<Vec<f64>> = (0..2000)
            .map(|_| {
                let u: f64 = rand::Rng::random::<f64>(&mut rng);
                vec![-(gpd_quantile(u, 0.9, 1.0) + 1.0).ln()]
            })
            .collect();
        let r = looic(&ll).unwrap();
        assert_eq!(r.flagged, vec![0]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(looic(&[vec![0.0]]).is_err());
        assert!(looic(&[vec![0.0], vec![f64::NAN]]).is_err());
        assert!(looic(&[vec![0.0, 1.0], vec![0.0]]).is_err());
    }
}
