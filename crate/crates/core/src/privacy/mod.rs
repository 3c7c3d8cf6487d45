//! Privacy audits for generated trajectories.
//!
//! * [`uniqueness_test`] scores every generated trajectory against every real one
//!   by normalized edit similarity over region sequences and flags near-copies.
//! * [`membership_inference_attack`] trains a classifier to tell training members
//!   from held-out trajectories using their similarity to the generated set.
//! * [`utility_probe`] measures whether synthetic data helps a next-region
//!   predictor evaluated on real data.

mod attack;
mod utility;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::evaluation::{EvalError, MetricHistogram};
use crate::geo::{GeoError, RegionId};
use crate::trajectory::Trajectory;

pub use attack::{
    membership_inference_attack, mia_features, Attacker, AttackReport, LogisticAttacker, LogisticConfig, MiaConfig,
    MlpAttacker, MlpConfig, NUM_MIA_FEATURES,
};
pub use utility::{utility_probe, ProbeConfig, ProbeResult};

#[derive(Debug, thiserror::Error)]
pub enum PrivacyError {
    #[error("similarity of two empty sequences is undefined")]
    BothEmpty,
    #[error("empty input: {0}")]
    Empty(String),
    #[error("unbalanced sets: {members} members vs {nonmembers} non-members")]
    Imbalance { members: usize, nonmembers: usize },
    #[error("training set has a single class")]
    SingleClass,
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite value during attacker training")]
    NonFinite,
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] mobiforge_autodiff::TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Unit-cost edit distance, using two rolling rows.
pub fn levenshtein(a: &[RegionId], b: &[RegionId]) -> usize {
    let (a, b) = if a.len() < b.len() { (b, a) } else { (a, b) };
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 − lev(a, b) / max(|a|, |b|)`.
pub fn similarity(a: &[RegionId], b: &[RegionId]) -> Result<f64, PrivacyError> {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return Err(PrivacyError::BothEmpty);
    }
    Ok(1.0 - levenshtein(a, b) as f64 / longest as f64)
}

/// Top-1 similarity above which a generated trajectory counts as memorized.
pub const MEMORIZATION_THRESHOLD: f64 = 0.8;
const HISTOGRAM_BINS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    /// Per generated trajectory: best score, and mean of the best 3 and 5.
    pub top1: Vec<f64>,
    pub top3: Vec<f64>,
    pub top5: Vec<f64>,
    pub mean_top1: f64,
    pub mean_top3: f64,
    pub mean_top5: f64,
    /// Fraction of generated trajectories with top-1 above the threshold.
    pub alarm_fraction: f64,
    /// Every generated × real score, binned over `[0, 1]`.
    pub histogram: MetricHistogram,
}

impl SimilarityReport {
    pub fn write_json(&self, path: &Path) -> Result<(), PrivacyError> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Best `k` similarities of each query against `pool`, sorted descending, plus
/// counts of all scores in `bins` equal bins over `[0, 1]`.
pub(crate) fn best_matches(
    queries: &[Vec<RegionId>],
    pool: &[Vec<RegionId>],
    k: usize,
    bins: usize,
    jobs: usize,
) -> Result<(Vec<Vec<f64>>, Vec<u64>), PrivacyError> {
    let work = |part: &[Vec<RegionId>]| -> Result<(Vec<Vec<f64>>, Vec<u64>), PrivacyError> {
        let mut counts = vec![0u64; bins];
        let mut out = Vec::with_capacity(part.len());
        for q in part {
            let mut best: Vec<f64> = Vec::with_capacity(k + 1);
            for p in pool {
                let s = similarity(q, p)?;
                counts[((s * bins as f64) as usize).min(bins - 1)] += 1;
                if best.len() < k || s > best[best.len() - 1] {
                    let at = best.partition_point(|&b| b >= s);
                    best.insert(at, s);
                    best.truncate(k);
                }
            }
            out.push(best);
        }
        Ok((out, counts))
    };
    let jobs = jobs.clamp(1, queries.len().max(1));
    if jobs == 1 {
        return work(queries);
    }
    let chunk = queries.len().div_ceil(jobs);
    std::thread::scope(|s| {
        let handles: Vec<_> = queries.chunks(chunk).map(|part| s.spawn(move || work(part))).collect();
        let mut best = Vec::with_capacity(queries.len());
        let mut counts = vec![0u64; bins];
        for h in handles {
            let (b, c) = h.join().expect("similarity worker panicked")?;
            best.extend(b);
            counts.iter_mut().zip(c).for_each(|(x, y)| *x += y);
        }
        Ok((best, counts))
    })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Similarity of each generated trajectory to its closest real ones.
pub fn uniqueness_test(generated: &[Trajectory], real: &[Trajectory], jobs: usize) -> Result<SimilarityReport, PrivacyError> {
    if generated.is_empty() || real.is_empty() {
        return Err(PrivacyError::Empty("uniqueness test needs generated and real trajectories".into()));
    }
    let g: Vec<Vec<RegionId>> = generated.iter().map(Trajectory::regions).collect();
    let r: Vec<Vec<RegionId>> = real.iter().map(Trajectory::regions).collect();
    let (best, counts) = best_matches(&g, &r, 5, HISTOGRAM_BINS, jobs)?;
    let top = |n: usize| -> Vec<f64> { best.iter().map(|b| mean(&b[..n.min(b.len())])).collect() };
    let top1 = top(1);
    // Means of identical scores can exceed the maximum by rounding.
    let top3: Vec<f64> = top(3).iter().zip(&top1).map(|(a, b)| a.min(*b)).collect();
    let top5: Vec<f64> = top(5).iter().zip(&top3).map(|(a, b)| a.min(*b)).collect();
    let total: u64 = counts.iter().sum();
    let histogram = MetricHistogram {
        edges: MetricHistogram::uniform_edges(1.0, HISTOGRAM_BINS),
        mass: counts.iter().map(|&c| c as f64 / total as f64).collect(),
    };
    Ok(SimilarityReport {
        mean_top1: mean(&top1),
        mean_top3: mean(&top3),
        mean_top5: mean(&top5),
        alarm_fraction: top1.iter().filter(|&&s| s > MEMORIZATION_THRESHOLD).count() as f64 / top1.len() as f64,
        top1,
        top3,
        top5,
        histogram,
    })
}
