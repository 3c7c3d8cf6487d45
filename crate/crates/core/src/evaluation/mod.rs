//! Fidelity metrics comparing generated trajectories against a reference set.
//!
//! Every metric reduces both sides to distributions on a shared support and
//! compares them with the base-2 Jensen–Shannon divergence, so scores lie in
//! `[0, 1]` and a set compared with itself scores exactly 0. Distance and
//! radius histograms use bins fitted on the reference side only.

mod epr;
mod od;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geo::{CityMap, GeoError, GeoPoint, RegionId};
use crate::trajectory::Trajectory;

pub use epr::{explore_probability, epr_generate, epr_generate_from, EprAgent, EprConfig};
pub use od::{build_od, cpc, OdMatrix};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("support mismatch: {left} vs {right} entries")]
    SupportMismatch { left: usize, right: usize },
    #[error("not a probability vector: {0}")]
    NotSimplex(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

const SIMPLEX_TOL: f64 = 1e-6;

fn check_simplex(p: &[f64]) -> Result<(), EvalError> {
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(EvalError::NotSimplex("negative or non-finite entry".into()));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(EvalError::NotSimplex(format!("mass {s}")));
    }
    Ok(())
}

fn kl2(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &mi)| pi * (pi / mi).log2())
        .sum()
}

/// Base-2 Jensen–Shannon divergence; zero entries contribute nothing.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64, EvalError> {
    if p.len() != q.len() {
        return Err(EvalError::SupportMismatch { left: p.len(), right: q.len() });
    }
    check_simplex(p)?;
    check_simplex(q)?;
    if p == q {
        return Ok(0.0);
    }
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok((0.5 * kl2(p, &m) + 0.5 * kl2(q, &m)).clamp(0.0, 1.0))
}

/// Normalized masses over `edges.len() - 1` bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricHistogram {
    pub edges: Vec<f64>,
    pub mass: Vec<f64>,
}

impl MetricHistogram {
    /// `bins` equal-width bins over `[0, upper]`.
    pub fn uniform_edges(upper: f64, bins: usize) -> Vec<f64> {
        (0..=bins).map(|i| upper * i as f64 / bins as f64).collect()
    }

    /// Values below the first edge land in bin 0, values past the last edge in
    /// the final bin.
    pub fn from_values(values: &[f64], edges: Vec<f64>) -> Result<Self, EvalError> {
        if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(EvalError::Config("histogram edges must be strictly increasing".into()));
        }
        if values.is_empty() {
            return Err(EvalError::Empty("histogram values".into()));
        }
        let bins = edges.len() - 1;
        let mut counts = vec![0usize; bins];
        for &v in values {
            // First edge strictly greater than v, minus one.
            let idx = edges.partition_point(|&e| e <= v).saturating_sub(1).min(bins - 1);
            counts[idx] += 1;
        }
        let n = values.len() as f64;
        Ok(Self {
            edges,
            mass: counts.into_iter().map(|c| c as f64 / n).collect(),
        })
    }

    pub fn bins(&self) -> usize {
        self.mass.len()
    }

    pub fn jsd(&self, other: &Self) -> Result<f64, EvalError> {
        if self.edges != other.edges {
            return Err(EvalError::SupportMismatch { left: self.edges.len(), right: other.edges.len() });
        }
        jsd(&self.mass, &other.mass)
    }

    /// Writes `bin_left,bin_right,mass` rows.
    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["bin_left", "bin_right", "mass"])?;
        for (i, m) in self.mass.iter().enumerate() {
            w.write_record([self.edges[i].to_string(), self.edges[i + 1].to_string(), m.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn centroids(traj: &Trajectory, map: &CityMap) -> Result<Vec<GeoPoint>, EvalError> {
    traj.stays
        .iter()
        .map(|s| Ok(map.region(s.region_id)?.centroid))
        .collect()
}

/// Mean centroid distance between consecutive stays (0 for a single stay).
pub fn travel_distance(traj: &Trajectory, map: &CityMap) -> Result<f64, EvalError> {
    let pts = centroids(traj, map)?;
    if pts.len() < 2 {
        return Ok(0.0);
    }
    let total: f64 = pts.windows(2).map(|w| map.distance_km(w[0], w[1])).sum();
    Ok(total / (pts.len() - 1) as f64)
}

/// Root-mean-square distance of the visited centroids from their mean point.
pub fn radius_of_gyration(traj: &Trajectory, map: &CityMap) -> Result<f64, EvalError> {
    let pts = centroids(traj, map)?;
    if pts.is_empty() {
        return Ok(0.0);
    }
    let n = pts.len() as f64;
    let center = GeoPoint::new(
        pts.iter().map(|p| p.lon).sum::<f64>() / n,
        pts.iter().map(|p| p.lat).sum::<f64>() / n,
    );
    let ms: f64 = pts.iter().map(|&p| map.distance_km(p, center).powi(2)).sum::<f64>() / n;
    Ok(ms.sqrt())
}

/// Number of distinct regions visited.
pub fn locnum(traj: &Trajectory) -> usize {
    traj.stays.iter().map(|s| s.region_id).collect::<BTreeSet<_>>().len()
}

/// Linear-interpolated quantile of unsorted data.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return 0.0;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Thresholds and support sizes for [`evaluate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub bins: usize,
    /// Upper edge of the distance/radius bins, as a quantile of the reference.
    pub upper_quantile: f64,
    pub grank_top: usize,
    pub rrank_top: usize,
    pub min_support: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bins: 50,
            upper_quantile: 0.995,
            grank_top: 100,
            rrank_top: 50,
            min_support: 20,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.bins == 0 || self.grank_top == 0 || self.rrank_top == 0 || self.min_support == 0 {
            return Err(EvalError::Config("bins, top-k sizes and min_support must be positive".into()));
        }
        if !(0.0 < self.upper_quantile && self.upper_quantile <= 1.0) {
            return Err(EvalError::Config(format!("upper_quantile {} outside (0, 1]", self.upper_quantile)));
        }
        Ok(())
    }
}

/// Paired histograms for one continuous metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramPair {
    pub real: MetricHistogram,
    pub generated: MetricHistogram,
}

impl HistogramPair {
    pub fn jsd(&self) -> Result<f64, EvalError> {
        self.real.jsd(&self.generated)
    }
}

fn continuous_pair(real: &[f64], generated: &[f64], cfg: &EvalConfig) -> Result<HistogramPair, EvalError> {
    let mut upper = quantile(real, cfg.upper_quantile);
    if !(upper > 0.0) {
        upper = 1.0;
    }
    let edges = MetricHistogram::uniform_edges(upper, cfg.bins);
    Ok(HistogramPair {
        real: MetricHistogram::from_values(real, edges.clone())?,
        generated: MetricHistogram::from_values(generated, edges)?,
    })
}

fn nonempty(real: &[Trajectory], generated: &[Trajectory]) -> Result<(), EvalError> {
    if real.is_empty() {
        return Err(EvalError::Empty("reference trajectories".into()));
    }
    if generated.is_empty() {
        return Err(EvalError::Empty("generated trajectories".into()));
    }
    Ok(())
}

pub fn metric_distance(real: &[Trajectory], generated: &[Trajectory], map: &CityMap, cfg: &EvalConfig) -> Result<HistogramPair, EvalError> {
    nonempty(real, generated)?;
    let r: Vec<f64> = real.iter().map(|t| travel_distance(t, map)).collect::<Result<_, _>>()?;
    let g: Vec<f64> = generated.iter().map(|t| travel_distance(t, map)).collect::<Result<_, _>>()?;
    continuous_pair(&r, &g, cfg)
}

pub fn metric_radius(real: &[Trajectory], generated: &[Trajectory], map: &CityMap, cfg: &EvalConfig) -> Result<HistogramPair, EvalError> {
    nonempty(real, generated)?;
    let r: Vec<f64> = real.iter().map(|t| radius_of_gyration(t, map)).collect::<Result<_, _>>()?;
    let g: Vec<f64> = generated.iter().map(|t| radius_of_gyration(t, map)).collect::<Result<_, _>>()?;
    continuous_pair(&r, &g, cfg)
}

/// Integer bins `1..=max_len`, where `max_len` is the longest trajectory on
/// either side.
pub fn metric_locnum(real: &[Trajectory], generated: &[Trajectory]) -> Result<HistogramPair, EvalError> {
    nonempty(real, generated)?;
    let max_len = real.iter().chain(generated).map(Trajectory::len).max().unwrap_or(1).max(1);
    let edges: Vec<f64> = (0..=max_len).map(|i| i as f64 + 0.5).collect();
    let r: Vec<f64> = real.iter().map(|t| locnum(t) as f64).collect();
    let g: Vec<f64> = generated.iter().map(|t| locnum(t) as f64).collect();
    Ok(HistogramPair {
        real: MetricHistogram::from_values(&r, edges.clone())?,
        generated: MetricHistogram::from_values(&g, edges)?,
    })
}

/// Global visit counts per region.
pub fn visit_counts<'a>(trajs: impl IntoIterator<Item = &'a Trajectory>) -> BTreeMap<RegionId, u64> {
    let mut counts = BTreeMap::new();
    for t in trajs {
        for s in &t.stays {
            *counts.entry(s.region_id).or_insert(0) += 1;
        }
    }
    counts
}

/// Top `k` keys by count, ties broken by lower id; ids in `universe` with no
/// count rank after every counted id.
fn top_k(counts: &BTreeMap<RegionId, u64>, universe: &[RegionId], k: usize) -> Vec<RegionId> {
    let mut ids: Vec<RegionId> = universe.to_vec();
    for id in counts.keys() {
        if !ids.contains(id) {
            ids.push(*id);
        }
    }
    ids.sort_by(|a, b| {
        let (ca, cb) = (counts.get(a).copied().unwrap_or(0), counts.get(b).copied().unwrap_or(0));
        cb.cmp(&ca).then(a.cmp(b))
    });
    ids.truncate(k);
    ids
}

/// Mass on each support id plus a trailing "other" bucket.
fn on_support(counts: &BTreeMap<RegionId, u64>, support: &[RegionId]) -> Vec<f64> {
    let total: u64 = counts.values().sum();
    let mut v: Vec<f64> = support.iter().map(|id| counts.get(id).copied().unwrap_or(0) as f64).collect();
    let inside: f64 = v.iter().sum();
    v.push(total as f64 - inside);
    if total == 0 {
        return v;
    }
    v.iter_mut().for_each(|x| *x /= total as f64);
    v
}

/// Region-indexed visit frequencies on the reference side's top-`k` regions
/// (all regions when the city has at most `k`), plus an "other" bucket.
pub fn metric_grank(real: &[Trajectory], generated: &[Trajectory], map: &CityMap, k: usize) -> Result<(Vec<RegionId>, Vec<f64>, Vec<f64>), EvalError> {
    nonempty(real, generated)?;
    let (rc, gc) = (visit_counts(real), visit_counts(generated));
    let universe: Vec<RegionId> = map.regions.iter().map(|r| r.region_id).collect();
    let support = top_k(&rc, &universe, k);
    Ok((support.clone(), on_support(&rc, &support), on_support(&gc, &support)))
}

/// Per-origin destination comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RrankResult {
    /// Weighted mean JSD over qualifying origins.
    pub jsd: f64,
    pub origins: usize,
    /// `(origin, real destination visits, jsd)` for each qualifying origin.
    pub per_origin: Vec<(RegionId, u64, f64)>,
}

fn destinations_by_origin(trajs: &[Trajectory]) -> BTreeMap<RegionId, (usize, BTreeMap<RegionId, u64>)> {
    let mut out: BTreeMap<RegionId, (usize, BTreeMap<RegionId, u64>)> = BTreeMap::new();
    for t in trajs {
        let Some(first) = t.stays.first() else { continue };
        let e = out.entry(first.region_id).or_default();
        e.0 += 1;
        for s in &t.stays[1..] {
            *e.1.entry(s.region_id).or_insert(0) += 1;
        }
    }
    out
}

/// For each origin (first stay) with at least `min_support` reference
/// trajectories, compares destination frequencies on the reference top-`k`
/// destinations plus "other". An origin the generated side never starts from
/// scores 1. The mean is weighted by reference destination visits.
pub fn metric_rrank(real: &[Trajectory], generated: &[Trajectory], k: usize, min_support: usize) -> Result<RrankResult, EvalError> {
    nonempty(real, generated)?;
    let (rd, gd) = (destinations_by_origin(real), destinations_by_origin(generated));
    let mut per_origin = Vec::new();
    for (&origin, (n, counts)) in &rd {
        let visits: u64 = counts.values().sum();
        if *n < min_support || visits == 0 {
            continue;
        }
        let score = match gd.get(&origin) {
            Some((_, gcounts)) if gcounts.values().sum::<u64>() > 0 => {
                let support = top_k(counts, &[], k);
                jsd(&on_support(counts, &support), &on_support(gcounts, &support))?
            }
            _ => 1.0,
        };
        per_origin.push((origin, visits, score));
    }
    if per_origin.is_empty() {
        return Err(EvalError::Empty(format!("no origin has {min_support} or more reference trajectories")));
    }
    let total: u64 = per_origin.iter().map(|p| p.1).sum();
    let jsd = per_origin.iter().map(|&(_, w, s)| w as f64 * s).sum::<f64>() / total as f64;
    Ok(RrankResult {
        jsd: jsd.clamp(0.0, 1.0),
        origins: per_origin.len(),
        per_origin,
    })
}

/// The five divergences plus flow overlap for one generated set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub distance_jsd: f64,
    pub radius_jsd: f64,
    pub locnum_jsd: f64,
    pub grank_jsd: f64,
    pub rrank_jsd: f64,
    pub rrank_origins: usize,
    pub cpc: f64,
    pub n_real: usize,
    pub n_generated: usize,
    pub config_hash: String,
}

impl MetricReport {
    pub fn write_json(&self, path: &Path) -> Result<(), EvalError> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self, EvalError> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Report plus the histograms behind the continuous metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub distance: HistogramPair,
    pub radius: HistogramPair,
    pub locnum: HistogramPair,
    pub rrank: RrankResult,
}

impl Evaluation {
    /// Writes `report.json` and one `<metric>_{real,generated}.csv` per histogram.
    pub fn write_to(&self, dir: &Path) -> Result<(), EvalError> {
        std::fs::create_dir_all(dir)?;
        self.report.write_json(&dir.join("report.json"))?;
        for (name, pair) in [("distance", &self.distance), ("radius", &self.radius), ("locnum", &self.locnum)] {
            pair.real.write_csv(&dir.join(format!("{name}_real.csv")))?;
            pair.generated.write_csv(&dir.join(format!("{name}_generated.csv")))?;
        }
        Ok(())
    }
}

pub fn evaluate(real: &[Trajectory], generated: &[Trajectory], map: &CityMap, cfg: &EvalConfig, config_hash: &str) -> Result<Evaluation, EvalError> {
    cfg.validate()?;
    let distance = metric_distance(real, generated, map, cfg)?;
    let radius = metric_radius(real, generated, map, cfg)?;
    let locnum = metric_locnum(real, generated)?;
    let (_, gr, gg) = metric_grank(real, generated, map, cfg.grank_top)?;
    let rrank = metric_rrank(real, generated, cfg.rrank_top, cfg.min_support)?;
    let (oa, ob) = (build_od(real), build_od(generated));
    let cpc = if oa.is_empty() && ob.is_empty() { 1.0 } else { cpc(&oa, &ob)? };
    let report = MetricReport {
        distance_jsd: distance.jsd()?,
        radius_jsd: radius.jsd()?,
        locnum_jsd: locnum.jsd()?,
        grank_jsd: jsd(&gr, &gg)?,
        rrank_jsd: rrank.jsd,
        rrank_origins: rrank.origins,
        cpc,
        n_real: real.len(),
        n_generated: generated.len(),
        config_hash: config_hash.to_string(),
    };
    Ok(Evaluation {
        report,
        distance,
        radius,
        locnum,
        rrank,
    })
}
