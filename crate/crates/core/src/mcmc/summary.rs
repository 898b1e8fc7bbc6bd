use serde::{Deserialize, Serialize};

use crate::model::PARAM_LAYOUT;
use crate::store::PosteriorSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
    /// Split-chain potential scale reduction; `None` when undefined
    /// (zero within-chain variance or too few draws).
    pub psr: Option<f64>,
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n)
}

/// Split-chain potential scale reduction: each chain is halved, and the
/// statistic is `sqrt((W + B) / W)` with `W` the mean within-half variance
/// and `B` the variance of the half means. Identical halves give exactly 1.
pub fn potential_scale_reduction(chains: &[&[f64]]) -> Option<f64> {
    let mut halves: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let h = c.len() / 2;
        if h < 2 {
            return None;
        }
        halves.push(&c[..h]);
        halves.push(&c[c.len() - h..]);
    }
    let stats: Vec<(f64, f64)> = halves.iter().map(|h| mean_var(h)).collect();
    let w = stats.iter().map(|s| s.1).sum::<f64>() / stats.len() as f64;
    if !(w > 0.0) {
        return None;
    }
    let means: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let (_, b) = mean_var(&means);
    Some(((w + b) / w).sqrt())
}

/// Per-parameter posterior summary over all draws, with convergence
/// diagnostics computed from the chain-major layout.
pub fn summarize(sample: &PosteriorSample) -> Vec<ParamSummary> {
    let per_chain = sample.meta.draws_per_chain.max(1);
    let columns: Vec<Vec<f64>> = (0..PARAM_LAYOUT.len())
        .map(|k| sample.params().iter().map(|p| p.to_flat()[k]).collect())
        .collect();
    PARAM_LAYOUT
        .iter()
        .zip(columns)
        .map(|(name, col)| {
            let (mean, var) = mean_var(&col);
            let mut sorted = col.clone();
            sorted.sort_by(f64::total_cmp);
            let chains: Vec<&[f64]> = col.chunks(per_chain).collect();
            ParamSummary {
                name: (*name).to_owned(),
                mean,
                sd: var.sqrt(),
                q025: quantile_sorted(&sorted, 0.025),
                q975: quantile_sorted(&sorted, 0.975),
                psr: potential_scale_reduction(&chains),
            }
        })
        .collect()
}
