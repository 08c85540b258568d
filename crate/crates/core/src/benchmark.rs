//! Benchmarked posterior projection.
//!
//! Each draw `theta` is mapped to the closest `theta_tilde` under the
//! weighted binary Kullback-Leibler loss
//! `sum psi [theta log(theta / theta~) + (1 - theta) log((1 - theta) / (1 - theta~))]`
//! subject to `sum q theta~ = t`. Stationarity gives, with `c = gamma q / psi`,
//! the positive root of `c x^2 + (1 - c) x - theta = 0`; `gamma` solves the
//! constraint and `sum q theta~(gamma)` is increasing in `gamma`.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::survey::{DomainRegistry, SHARE_TOLERANCE};

/// Interior nudge for draws that sit on the boundary.
pub const BOUNDARY_EPS: f64 = 1e-12;
/// Convergence tolerance on the constraint residual.
pub const ROOT_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    Bregman,
    Squared,
}

impl FromStr for Loss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bregman" => Ok(Loss::Bregman),
            "squared" => Ok(Loss::Squared),
            _ => Err(Error::input(format!("unknown loss `{s}` (expected bregman or squared)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkProblem {
    pub q: Vec<f64>,
    pub psi: Vec<f64>,
    pub t: f64,
}

impl BenchmarkProblem {
    /// `psi` defaults to `q`.
    pub fn new(q: Vec<f64>, psi: Option<Vec<f64>>, t: f64) -> Result<Self> {
        if q.is_empty() {
            return Err(Error::input("benchmark needs at least one domain"));
        }
        if q.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::input("shares q must be positive"));
        }
        let total: f64 = q.iter().sum();
        if (total - 1.0).abs() > SHARE_TOLERANCE {
            return Err(Error::input(format!("shares q sum to {total}, not 1")));
        }
        let psi = psi.unwrap_or_else(|| q.clone());
        if psi.len() != q.len() {
            return Err(Error::input("psi and q differ in length"));
        }
        if psi.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::input("weights psi must be positive"));
        }
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::input(format!("benchmark t = {t} must lie strictly inside (0, 1)")));
        }
        Ok(Self { q, psi, t })
    }

    /// National shares of a registry in sub-area order.
    pub fn from_registry(registry: &DomainRegistry, psi: Option<Vec<f64>>, t: f64) -> Result<Self> {
        Self::new(registry.national_share.clone(), psi, t)
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn residual(&self, theta: &[f64]) -> f64 {
        self.q.iter().zip(theta).map(|(q, th)| q * th).sum::<f64>() - self.t
    }
}

/// Weighted binary KL divergence of `theta_tilde` from `theta`.
pub fn bregman_loss(theta: &[f64], theta_tilde: &[f64], psi: &[f64]) -> Result<f64> {
    if theta.len() != theta_tilde.len() || theta.len() != psi.len() {
        return Err(Error::input("vectors differ in length"));
    }
    let interior = |v: &f64| *v > 0.0 && *v < 1.0;
    if !theta.iter().chain(theta_tilde).all(interior) {
        return Err(Error::domain("Bregman loss needs all coordinates strictly inside (0, 1)"));
    }
    Ok(theta
        .iter()
        .zip(theta_tilde)
        .zip(psi)
        .map(|((&a, &b), w)| w * (a * (a / b).ln() + (1.0 - a) * ((1.0 - a) / (1.0 - b)).ln()))
        .sum())
}

/// Projected coordinate for a given `c = gamma q / psi`, in a form free of
/// cancellation for every sign of `c`.
fn shifted(theta: f64, c: f64) -> f64 {
    if c == 0.0 {
        return theta;
    }
    let a = 1.0 - c;
    let root = if a == 0.0 { (4.0 * c * theta).sqrt() } else { a.abs() * (1.0 + 4.0 * c * theta / (a * a)).sqrt() };
    if a >= 0.0 {
        2.0 * theta / (root + a)
    } else {
        (root - a) / (2.0 * c)
    }
}

fn project_with(theta: &[f64], p: &BenchmarkProblem, gamma: f64) -> Vec<f64> {
    theta.iter().zip(p.q.iter().zip(&p.psi)).map(|(&th, (q, psi))| shifted(th, gamma * q / psi)).collect()
}

fn residual_at(theta: &[f64], p: &BenchmarkProblem, gamma: f64) -> f64 {
    theta.iter().zip(p.q.iter().zip(&p.psi)).map(|(&th, (q, psi))| q * shifted(th, gamma * q / psi)).sum::<f64>() - p.t
}

/// Clamp boundary coordinates into `[eps, 1 - eps]`; reject values outside `[0, 1]`.
fn nudge(theta: &[f64]) -> Result<Vec<f64>> {
    theta
        .iter()
        .map(|&v| {
            if !(0.0..=1.0).contains(&v) {
                Err(Error::domain(format!("coordinate {v} outside [0, 1]")))
            } else {
                Ok(v.clamp(BOUNDARY_EPS, 1.0 - BOUNDARY_EPS))
            }
        })
        .collect()
}

/// Solve for the multiplier `gamma`. Returns `(gamma, projected)`.
pub fn solve_gamma(theta: &[f64], p: &BenchmarkProblem) -> Result<(f64, Vec<f64>)> {
    if theta.len() != p.len() {
        return Err(Error::input(format!("draw has {} coordinates, problem has {}", theta.len(), p.len())));
    }
    let theta = nudge(theta)?;
    let g0 = residual_at(&theta, p, 0.0);
    if g0.abs() <= ROOT_TOL {
        return Ok((0.0, theta));
    }
    // the root lies on the side opposite to the residual's sign
    let (mut lo, mut hi) = if g0 > 0.0 { (-1.0, 0.0) } else { (0.0, 1.0) };
    let (mut g_lo, mut g_hi) =
        if g0 > 0.0 { (residual_at(&theta, p, lo), g0) } else { (g0, residual_at(&theta, p, hi)) };
    let mut expansions = 0;
    while g_lo > 0.0 || g_hi < 0.0 {
        expansions += 1;
        if expansions > 200 {
            return Err(Error::numerical(format!(
                "could not bracket the multiplier: residuals {g_lo:e} at {lo:e} and {g_hi:e} at {hi:e}"
            )));
        }
        if g_lo > 0.0 {
            hi = lo;
            g_hi = g_lo;
            lo *= 4.0;
            g_lo = residual_at(&theta, p, lo);
        } else {
            lo = hi;
            g_lo = g_hi;
            hi *= 4.0;
            g_hi = residual_at(&theta, p, hi);
        }
    }
    // bisection refined by secant steps, kept inside the bracket
    let mut gamma = 0.5 * (lo + hi);
    for _ in 0..500 {
        let secant = lo - g_lo * (hi - lo) / (g_hi - g_lo);
        gamma = if secant.is_finite() && secant > lo && secant < hi { secant } else { 0.5 * (lo + hi) };
        let mid_width = hi - lo;
        let g = residual_at(&theta, p, gamma);
        if g.abs() <= ROOT_TOL {
            return Ok((gamma, project_with(&theta, p, gamma)));
        }
        if g < 0.0 {
            lo = gamma;
            g_lo = g;
        } else {
            hi = gamma;
            g_hi = g;
        }
        // force a bisection when the secant stalls on one side
        if hi - lo > 0.5 * mid_width {
            let mid = 0.5 * (lo + hi);
            let gm = residual_at(&theta, p, mid);
            if gm.abs() <= ROOT_TOL {
                return Ok((mid, project_with(&theta, p, mid)));
            }
            if gm < 0.0 {
                lo = mid;
                g_lo = gm;
            } else {
                hi = mid;
                g_hi = gm;
            }
        }
        if hi - lo <= f64::EPSILON * lo.abs().max(hi.abs()) {
            break;
        }
    }
    let projected = project_with(&theta, p, gamma);
    let r = p.residual(&projected);
    if r.abs() <= ROOT_TOL {
        Ok((gamma, projected))
    } else {
        Err(Error::numerical(format!("multiplier search stalled at gamma = {gamma:e} with residual {r:e}")))
    }
}

/// Bregman projection of one draw onto `sum q theta~ = t`.
pub fn project_draw(theta: &[f64], problem: &BenchmarkProblem) -> Result<Vec<f64>> {
    solve_gamma(theta, problem).map(|(_, v)| v)
}

/// Weighted squared-error projection: an affine shift along `q / psi`.
/// The result is not confined to `(0, 1)`.
pub fn project_squared_error(theta: &[f64], problem: &BenchmarkProblem) -> Vec<f64> {
    let p = problem;
    let denom: f64 = p.q.iter().zip(&p.psi).map(|(q, psi)| q * q / psi).sum();
    let shift = -p.residual(theta) / denom;
    theta.iter().zip(p.q.iter().zip(&p.psi)).map(|(th, (q, psi))| th + shift * q / psi).collect()
}

/// Project every draw; errors carry the draw index.
pub fn project_posterior(draws: &[Vec<f64>], problem: &BenchmarkProblem, loss: Loss) -> Result<Vec<Vec<f64>>> {
    draws
        .par_iter()
        .enumerate()
        .map(|(i, d)| match loss {
            Loss::Bregman => project_draw(d, problem).map_err(|e| Error::numerical(format!("draw {i}: {e}"))),
            Loss::Squared => {
                if d.len() != problem.len() {
                    return Err(Error::input(format!("draw {i}: wrong number of coordinates")));
                }
                Ok(project_squared_error(d, problem))
            }
        })
        .collect()
}

/// Feasibility summary of a set of projected draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub loss: Loss,
    pub draws: usize,
    pub domains: usize,
    pub t: f64,
    pub max_abs_residual: f64,
    /// Number of coordinates outside `(0, 1)` over all draws.
    pub support_violations: usize,
    pub draws_with_violations: usize,
    pub min_value: f64,
    pub max_value: f64,
}

pub fn feasibility(projected: &[Vec<f64>], problem: &BenchmarkProblem, loss: Loss) -> FeasibilityReport {
    let mut rep = FeasibilityReport {
        loss,
        draws: projected.len(),
        domains: problem.len(),
        t: problem.t,
        max_abs_residual: 0.0,
        support_violations: 0,
        draws_with_violations: 0,
        min_value: f64::INFINITY,
        max_value: f64::NEG_INFINITY,
    };
    for d in projected {
        rep.max_abs_residual = rep.max_abs_residual.max(problem.residual(d).abs());
        let bad = d.iter().filter(|v| !(**v > 0.0 && **v < 1.0)).count();
        rep.support_violations += bad;
        rep.draws_with_violations += usize::from(bad > 0);
        for &v in d {
            rep.min_value = rep.min_value.min(v);
            rep.max_value = rep.max_value.max(v);
        }
    }
    rep
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn problem(q: &[f64], t: f64) -> BenchmarkProblem {
        BenchmarkProblem::new(q.to_vec(), None, t).unwrap()
    }

    #[test]
    fn loss_hand_value() {
        let l = bregman_loss(&[0.5], &[0.25], &[1.0]).unwrap();
        let want = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((l - want).abs() < 1e-15);
        assert!((want - 0.1438).abs() < 1e-4);
        assert_eq!(bregman_loss(&[0.3, 0.6], &[0.3, 0.6], &[1.0, 2.0]).unwrap(), 0.0);
        let a = bregman_loss(&[0.3, 0.6], &[0.2, 0.7], &[1.0, 2.0]).unwrap();
        let b = bregman_loss(&[0.3, 0.6], &[0.2, 0.7], &[3.0, 6.0]).unwrap();
        assert!((b - 3.0 * a).abs() < 1e-15);
        assert!(bregman_loss(&[0.0], &[0.5], &[1.0]).is_err());
    }

    #[test]
    fn closed_form_matches_quadratic_root() {
        for (th, c) in [(0.2, 0.5), (0.7, -3.0), (0.01, 40.0), (0.99, -1e6), (0.5, 1.0), (0.3, 1e-14)] {
            let x = shifted(th, c);
            // positive root of c x^2 + (1 - c) x - theta
            assert!((c * x * x + (1.0 - c) * x - th).abs() < 1e-12, "{th} {c}: {x}");
            assert!(x > 0.0 && x < 1.0);
        }
    }

    #[test]
    fn identity_when_feasible() {
        let p = problem(&[0.25, 0.25, 0.5], 0.4);
        let th = [0.2, 0.4, 0.5];
        let (gamma, out) = solve_gamma(&th, &p).unwrap();
        assert_eq!(gamma, 0.0);
        assert_eq!(out, th.to_vec());
        assert_eq!(project_squared_error(&th, &p), th.to_vec());
    }

    #[test]
    fn equal_inputs_project_to_t() {
        let p = problem(&[0.1, 0.2, 0.3, 0.4], 0.35);
        let out = project_draw(&[0.6; 4], &p).unwrap();
        assert!(out.iter().all(|v| (v - 0.35).abs() < 1e-12), "{out:?}");
    }

    #[test]
    fn two_domain_fixture_against_bisection() {
        let p = problem(&[0.5, 0.5], 0.35);
        let th = [0.2, 0.4];
        // independent bisection over the unrationalized closed form
        let lhs = |g: f64| -> f64 {
            (0..2)
                .map(|k| {
                    let c = g * p.q[k] / p.psi[k];
                    p.q[k] * (0.5 + ((1.0 - c).powi(2) + 4.0 * th[k] * c).sqrt().mul_add(1.0, -1.0) / (2.0 * c))
                })
                .sum()
        };
        let (mut a, mut b) = (1e-9, 10.0);
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if lhs(m) < 0.35 {
                a = m;
            } else {
                b = m;
            }
        }
        let (gamma, out) = solve_gamma(&th, &p).unwrap();
        assert!((gamma - a).abs() < 1e-8, "{gamma} vs {a}");
        assert!((p.residual(&out)).abs() < 1e-12);
        let sq = project_squared_error(&th, &p);
        assert!((sq[0] - 0.25).abs() < 1e-15 && (sq[1] - 0.45).abs() < 1e-15, "{sq:?}");
    }

    #[test]
    fn squared_loss_leaves_support() {
        let p = problem(&[0.5, 0.5], 0.05);
        let th = [0.01, 0.4];
        let sq = project_squared_error(&th, &p);
        assert!(sq[0] < 0.0);
        let br = project_draw(&th, &p).unwrap();
        assert!(br.iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn boundary_draws_are_nudged() {
        let p = problem(&[0.5, 0.5], 0.3);
        let out = project_draw(&[0.0, 1.0], &p).unwrap();
        assert!(out.iter().all(|v| *v > 0.0 && *v < 1.0));
        assert!(project_draw(&[-0.1, 0.5], &p).is_err());
        let err = project_posterior(&[vec![0.2, 0.3], vec![0.5, f64::NAN]], &p, Loss::Bregman).unwrap_err();
        assert!(err.to_string().contains("draw 1"), "{err}");
    }

    #[test]
    fn problem_validation() {
        assert!(BenchmarkProblem::new(vec![0.5, 0.4], None, 0.3).is_err());
        assert!(BenchmarkProblem::new(vec![0.5, 0.5], None, 1.0).is_err());
        assert!(BenchmarkProblem::new(vec![0.5, 0.5], Some(vec![1.0]), 0.3).is_err());
        assert!(BenchmarkProblem::new(vec![0.5, 0.5], Some(vec![1.0, -1.0]), 0.3).is_err());
        assert!(BenchmarkProblem::new(vec![1.0 - 1e-10, 1e-10], None, 0.3).is_ok());
        assert_eq!("squared".parse::<Loss>().unwrap(), Loss::Squared);
    }

    #[test]
    fn extreme_targets_converge() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let m = 50;
        let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let q: Vec<f64> = raw.iter().map(|v| v / s).collect();
        for t in [1e-6, 0.001, 0.5, 0.999, 1.0 - 1e-6] {
            let p = BenchmarkProblem::new(q.clone(), None, t).unwrap();
            let th: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..0.99)).collect();
            let out = project_draw(&th, &p).unwrap();
            assert!(p.residual(&out).abs() <= 1e-10, "t={t}");
            assert!(out.iter().all(|v| *v > 0.0 && *v < 1.0), "t={t}");
        }
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, f64)> {
        (2usize..8).prop_flat_map(|m| {
            (
                proptest::collection::vec(0.05f64..1.0, m),
                proptest::collection::vec(0.1f64..3.0, m),
                proptest::collection::vec(0.001f64..0.999, m),
                0.01f64..0.99,
            )
        })
    }

    proptest! {
        #[test]
        fn feasible_and_sign_consistent((raw, psi, th, t) in instance()) {
            let s: f64 = raw.iter().sum();
            let q: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let p = BenchmarkProblem::new(q, Some(psi), t).unwrap();
            let (gamma, out) = solve_gamma(&th, &p).unwrap();
            prop_assert!(p.residual(&out).abs() <= 1e-10);
            prop_assert!(out.iter().all(|v| *v > 0.0 && *v < 1.0));
            // gamma moves in the direction of t - sum q theta
            let r = -p.residual(&th);
            prop_assert!(gamma * r >= 0.0);
            // each coordinate moves the same way
            for (a, b) in th.iter().zip(&out) {
                prop_assert!((b - a) * r >= -1e-15);
            }
        }

        #[test]
        fn monotone_in_each_coordinate((raw, _psi, th, t) in instance(), k in 0usize..8, bump in 0.0001f64..0.2) {
            let s: f64 = raw.iter().sum();
            let q: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let p = BenchmarkProblem::new(q, None, t).unwrap();
            let k = k % th.len();
            let mut up = th.clone();
            up[k] = (up[k] + bump).min(0.999);
            let a = project_draw(&th, &p).unwrap();
            let b = project_draw(&up, &p).unwrap();
            prop_assert!(b[k] >= a[k] - 1e-12);
        }

        #[test]
        fn projection_beats_random_feasible_points((raw, psi, th, t) in instance(), dir in proptest::collection::vec(-1.0f64..1.0, 8), step in 1e-4f64..0.05) {
            let s: f64 = raw.iter().sum();
            let q: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let m = q.len();
            let p = BenchmarkProblem::new(q.clone(), Some(psi.clone()), t).unwrap();
            let best = project_draw(&th, &p).unwrap();
            // move along a direction orthogonal to q (stays feasible)
            let d: Vec<f64> = dir[..m].to_vec();
            let qd: f64 = q.iter().zip(&d).map(|(a, b)| a * b).sum();
            let qq: f64 = q.iter().map(|a| a * a).sum();
            let d: Vec<f64> = d.iter().zip(&q).map(|(v, qk)| v - qd / qq * qk).collect();
            let other: Vec<f64> = best.iter().zip(&d).map(|(b, v)| b + step * v).collect();
            prop_assume!(other.iter().all(|v| *v > 0.0 && *v < 1.0));
            let lb = bregman_loss(&th, &best, &psi).unwrap();
            let lo = bregman_loss(&th, &other, &psi).unwrap();
            prop_assert!(lb <= lo + 1e-12);
        }
    }
}
