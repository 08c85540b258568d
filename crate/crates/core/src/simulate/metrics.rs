use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::survey::Level;

/// Domain groups of the summary table. For areas, `Oos` means the area has
/// at least one out-of-sample sub-area; for sub-areas, the sub-area itself
/// is out of sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    NoOos,
    Oos,
    Overall,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::NoOos, Group::Oos, Group::Overall];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::NoOos => "no_oos",
            Group::Oos => "oos",
            Group::Overall => "overall",
        }
    }

    fn contains(self, oos: bool) -> bool {
        match self {
            Group::NoOos => !oos,
            Group::Oos => oos,
            Group::Overall => true,
        }
    }
}

/// Point estimates and 90% interval bounds of one replicate, by domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalEstimates {
    pub point: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub estimator: String,
    pub level: Level,
    pub domain_id: String,
    pub oos: bool,
    pub truth: f64,
    pub bias: f64,
    pub rmse: f64,
    pub coverage: f64,
    pub replicates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub estimator: String,
    pub level: Level,
    pub group: Group,
    pub domains: usize,
    /// Signed mean relative error, in percent.
    pub mape: Option<f64>,
    /// Mean absolute relative error, in percent.
    pub mape_abs: Option<f64>,
    pub arrmse: Option<f64>,
    pub median_coverage: Option<f64>,
    /// Domains left out of the relative measures because their truth is 0.
    pub excluded_zero_truth: usize,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Bias, RMSE and coverage per domain, and MAPE, ARRMSE and median coverage
/// per group. Domains with a non-finite estimate in any replicate are
/// skipped and reported in the returned notes.
pub fn compute_metrics(
    estimator: &str,
    level: Level,
    ids: &[String],
    truths: &[f64],
    oos: &[bool],
    replicates: &[IntervalEstimates],
) -> Result<(Vec<DomainMetrics>, Vec<GroupSummary>, Vec<String>)> {
    let n = ids.len();
    if truths.len() != n || oos.len() != n {
        return Err(Error::input("ids, truths and OOS flags differ in length"));
    }
    if replicates.iter().any(|r| r.point.len() != n || r.lower.len() != n || r.upper.len() != n) {
        return Err(Error::input("replicate estimates are not aligned with the domains"));
    }
    let mut notes = Vec::new();
    let mut domains = Vec::new();
    let mut abs_rel = Vec::new();
    let b = replicates.len();
    for i in 0..n {
        if b == 0 {
            break;
        }
        if replicates.iter().any(|r| !(r.point[i].is_finite() && r.lower[i].is_finite() && r.upper[i].is_finite())) {
            notes.push(format!("{estimator}: `{}` has non-finite estimates and is skipped", ids[i]));
            continue;
        }
        let truth = truths[i];
        let bf = b as f64;
        let bias = replicates.iter().map(|r| r.point[i] - truth).sum::<f64>() / bf;
        let rmse = (replicates.iter().map(|r| (r.point[i] - truth).powi(2)).sum::<f64>() / bf).sqrt();
        let coverage = replicates.iter().filter(|r| r.lower[i] <= truth && truth <= r.upper[i]).count() as f64 / bf;
        abs_rel.push(replicates.iter().map(|r| ((r.point[i] - truth) / truth).abs()).sum::<f64>() / bf);
        domains.push(DomainMetrics {
            estimator: estimator.to_owned(),
            level,
            domain_id: ids[i].clone(),
            oos: oos[i],
            truth,
            bias,
            rmse,
            coverage,
            replicates: b,
        });
    }
    let zero: Vec<&str> = domains.iter().filter(|d| d.truth == 0.0).map(|d| d.domain_id.as_str()).collect();
    if !zero.is_empty() {
        notes.push(format!("{estimator}: zero truth excluded from MAPE and ARRMSE: {}", zero.join(", ")));
    }
    let summaries = Group::ALL
        .iter()
        .map(|&group| {
            let members: Vec<usize> = (0..domains.len()).filter(|&k| group.contains(domains[k].oos)).collect();
            let rel: Vec<usize> = members.iter().copied().filter(|&k| domains[k].truth != 0.0).collect();
            let mean = |f: &dyn Fn(usize) -> f64| -> Option<f64> {
                (!rel.is_empty()).then(|| rel.iter().map(|&k| f(k)).sum::<f64>() / rel.len() as f64)
            };
            GroupSummary {
                estimator: estimator.to_owned(),
                level,
                group,
                domains: members.len(),
                mape: mean(&|k| 100.0 * domains[k].bias / domains[k].truth),
                mape_abs: mean(&|k| 100.0 * abs_rel[k]),
                arrmse: mean(&|k| domains[k].rmse / domains[k].truth),
                median_coverage: median(members.iter().map(|&k| domains[k].coverage).collect()),
                excluded_zero_truth: members.len() - rel.len(),
            }
        })
        .collect();
    Ok((domains, summaries, notes))
}
