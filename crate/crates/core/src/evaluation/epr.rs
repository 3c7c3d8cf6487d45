//! Density-weighted exploration and preferential return.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geo::{CityMap, RegionId};
use crate::trajectory::{StayPoint, Trajectory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EprConfig {
    pub rho: f64,
    pub gamma: f64,
    /// Trajectories have `k + 1` stays.
    pub k: usize,
    /// Start time used by [`epr_generate`].
    pub start_time: u64,
    /// Seconds between consecutive stays.
    pub interval_seconds: u64,
}

impl Default for EprConfig {
    fn default() -> Self {
        Self {
            rho: 0.6,
            gamma: 0.21,
            k: 8,
            start_time: 1_704_096_000,
            interval_seconds: 5400,
        }
    }
}

/// `ρ·S^(−γ)` clamped to `[0, 1]`; `S = 0` is treated as 1.
pub fn explore_probability(rho: f64, gamma: f64, distinct: usize) -> f64 {
    (rho * (distinct.max(1) as f64).powf(-gamma)).clamp(0.0, 1.0)
}

fn density(map: &CityMap) -> Vec<f64> {
    let w: Vec<f64> = map.regions.iter().map(|r| r.poi_count as f64).collect();
    if w.iter().sum::<f64>() > 0.0 {
        w
    } else {
        vec![1.0; w.len()]
    }
}

/// One agent's visit history.
#[derive(Clone, Debug, PartialEq)]
pub struct EprAgent {
    pub current: RegionId,
    pub visits: BTreeMap<RegionId, u64>,
}

impl EprAgent {
    pub fn new(start: RegionId) -> Self {
        Self {
            current: start,
            visits: BTreeMap::from([(start, 1)]),
        }
    }

    pub fn distinct(&self) -> usize {
        self.visits.len()
    }

    /// Moves once; returns whether the move explored a new region. When every
    /// region has been seen, exploration falls back to a return.
    pub fn step(&mut self, map: &CityMap, density: &[f64], rho: f64, gamma: f64, rng: &mut impl Rng) -> bool {
        let p = explore_probability(rho, gamma, self.distinct());
        let unseen: Vec<usize> = (0..map.regions.len())
            .filter(|&i| !self.visits.contains_key(&map.regions[i].region_id))
            .collect();
        let explore = rng.random::<f64>() < p && !unseen.is_empty();
        let next = if explore {
            let mut w: Vec<f64> = unseen.iter().map(|&i| density[i]).collect();
            if w.iter().sum::<f64>() <= 0.0 {
                w.iter_mut().for_each(|x| *x = 1.0);
            }
            let pick = WeightedIndex::new(&w).expect("positive weights").sample(rng);
            map.regions[unseen[pick]].region_id
        } else {
            let ids: Vec<RegionId> = self.visits.keys().copied().collect();
            let w: Vec<u64> = self.visits.values().copied().collect();
            ids[WeightedIndex::new(&w).expect("positive counts").sample(rng)]
        };
        *self.visits.entry(next).or_insert(0) += 1;
        self.current = next;
        explore
    }
}

/// `n` trajectories whose first region is drawn by POI density.
pub fn epr_generate(map: &CityMap, n: usize, cfg: &EprConfig, seed: u64) -> Vec<Trajectory> {
    if map.regions.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts = WeightedIndex::new(density(map)).expect("positive weights");
    let anchors: Vec<(RegionId, u64)> = (0..n)
        .map(|_| (map.regions[starts.sample(&mut rng)].region_id, cfg.start_time))
        .collect();
    epr_generate_from(map, &anchors, cfg, rng.random())
}

/// One trajectory per `(start region, start time)` anchor.
pub fn epr_generate_from(map: &CityMap, anchors: &[(RegionId, u64)], cfg: &EprConfig, seed: u64) -> Vec<Trajectory> {
    let dens = density(map);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    anchors
        .iter()
        .enumerate()
        .map(|(i, &(start, t0))| {
            let mut agent = EprAgent::new(start);
            let mut stays = vec![StayPoint { region_id: start, timestamp: t0 }];
            for step in 1..=cfg.k as u64 {
                agent.step(map, &dens, cfg.rho, cfg.gamma, &mut rng);
                stays.push(StayPoint {
                    region_id: agent.current,
                    timestamp: t0 + step * cfg.interval_seconds,
                });
            }
            Trajectory {
                agent_id: format!("epr_{i}"),
                city_id: map.city_id.clone(),
                stays,
            }
        })
        .collect()
}
