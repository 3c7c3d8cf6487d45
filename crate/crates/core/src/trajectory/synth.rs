//! Synthetic cities with planted semantic structure.
//!
//! Regions are grouped into functional clusters (homes, offices, restaurants, ...)
//! placed in spatial zones. Each cluster has a dominant POI category; every region
//! mixes that category with region-specific noise, so semantics identify the
//! cluster but not the exact region. Agents follow a role archetype: a fixed daily
//! visit sequence with fixed dwell times, from a jittered start slot. With
//! probability `deviation` a stay is replaced by a uniformly random other region.
//!
//! Given the role, the current cluster and the current slot, the next cluster and
//! the next slot are fully determined (see [`SynthCity::planned_next`]).

use std::collections::{BTreeMap, BTreeSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, Normal};
use serde::{Deserialize, Serialize};

use super::{StayPoint, TimeSlotting, Trajectory, TrajectoryError, SECONDS_PER_DAY};
use crate::geo::{
    aggregate_semantics, build_partition_with, CityMap, DistanceMetric, GeoPoint, PoiCategory,
    PoiRecord, RegionId,
};

const KM_PER_DEGREE: f64 = 111.195;
const MIN_SEED_SEPARATION_KM: f64 = 0.3;
const POI_SPREAD_KM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub name: String,
    pub category: PoiCategory,
    /// Relative share of the city's regions.
    pub share: f64,
    /// Anchored clusters give each agent one fixed region (a home, an office).
    #[serde(default)]
    pub anchored: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub cluster: String,
    pub dwell_slots: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Archetype {
    pub role: String,
    pub instruction: String,
    pub weight: f64,
    /// Inclusive range of within-day start slots.
    pub start_slots: (usize, usize),
    pub visits: Vec<Visit>,
}

fn default_slot_minutes() -> u32 {
    30
}
fn default_extent() -> f64 {
    20.0
}
fn default_days() -> u64 {
    7
}
fn default_epoch() -> u64 {
    1_704_067_200
}
fn default_pois() -> (usize, usize) {
    (30, 80)
}
fn default_share() -> f64 {
    0.55
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub city_id: String,
    pub n_regions: usize,
    pub n_agents: usize,
    /// Trajectories have `k + 1` stays.
    pub k: usize,
    #[serde(default)]
    pub deviation: f64,
    pub seed: u64,
    #[serde(default = "default_slot_minutes")]
    pub slot_minutes: u32,
    #[serde(default = "default_extent")]
    pub extent_km: f64,
    #[serde(default)]
    pub center: Option<GeoPoint>,
    #[serde(default)]
    pub metric: DistanceMetric,
    #[serde(default = "default_days")]
    pub days: u64,
    /// Midnight (UTC) of the first simulated day.
    #[serde(default = "default_epoch")]
    pub start_epoch: u64,
    #[serde(default = "default_pois")]
    pub pois_per_region: (usize, usize),
    /// Weight of the cluster category in each region's POI mix.
    #[serde(default = "default_share")]
    pub dominant_share: f64,
    #[serde(default = "default_clusters")]
    pub clusters: Vec<ClusterSpec>,
    #[serde(default = "default_archetypes")]
    pub archetypes: Vec<Archetype>,
}

impl SynthConfig {
    pub fn new(city_id: &str, n_regions: usize, n_agents: usize, seed: u64) -> Self {
        Self {
            city_id: city_id.to_string(),
            n_regions,
            n_agents,
            k: 8,
            deviation: 0.1,
            seed,
            slot_minutes: default_slot_minutes(),
            extent_km: default_extent(),
            center: None,
            metric: DistanceMetric::Haversine,
            days: default_days(),
            start_epoch: default_epoch(),
            pois_per_region: default_pois(),
            dominant_share: default_share(),
            clusters: default_clusters(),
            archetypes: default_archetypes(),
        }
    }

    pub fn slotting(&self) -> Result<TimeSlotting, TrajectoryError> {
        TimeSlotting::new(self.slot_minutes)
    }

    fn validate(&self) -> Result<(), TrajectoryError> {
        let bad = |m: String| Err(TrajectoryError::InvalidConfig(m));
        if self.n_regions < 4 {
            return bad(format!("n_regions must be at least 4, got {}", self.n_regions));
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.deviation) {
            return bad(format!("deviation {} outside [0, 1]", self.deviation));
        }
        if self.days == 0 || self.start_epoch % SECONDS_PER_DAY != 0 {
            return bad("days must be positive and start_epoch a UTC midnight".into());
        }
        if !(0.0..1.0).contains(&self.dominant_share) || self.extent_km <= 0.0 {
            return bad("dominant_share must be in [0, 1) and extent_km positive".into());
        }
        let (lo, hi) = self.pois_per_region;
        if lo == 0 || lo > hi {
            return bad(format!("pois_per_region ({lo}, {hi}) is not a valid range"));
        }
        if self.clusters.is_empty() || self.clusters.len() > self.n_regions {
            return bad(format!(
                "{} clusters cannot be laid out on {} regions",
                self.clusters.len(),
                self.n_regions
            ));
        }
        let names: BTreeSet<&str> = self.clusters.iter().map(|c| c.name.as_str()).collect();
        if names.len() != self.clusters.len() {
            return bad("cluster names must be unique".into());
        }
        if self.clusters.iter().any(|c| c.share <= 0.0) {
            return bad("cluster shares must be positive".into());
        }
        if self.archetypes.is_empty() || self.archetypes.iter().all(|a| a.weight <= 0.0) {
            return bad("at least one archetype with positive weight is required".into());
        }
        let spd = self.slotting()?.slots_per_day();
        for a in &self.archetypes {
            if a.instruction.trim().is_empty() {
                return bad(format!("archetype {:?} has an empty instruction", a.role));
            }
            if a.visits.len() < self.k + 1 {
                return bad(format!(
                    "archetype {:?} defines {} visits but k + 1 = {} are needed",
                    a.role,
                    a.visits.len(),
                    self.k + 1
                ));
            }
            if a.start_slots.0 > a.start_slots.1 || a.start_slots.1 >= spd {
                return bad(format!("archetype {:?} has an invalid start slot range", a.role));
            }
            for v in &a.visits[..self.k + 1] {
                if !names.contains(v.cluster.as_str()) {
                    return bad(format!(
                        "archetype {:?} references missing cluster {:?}",
                        a.role, v.cluster
                    ));
                }
                if v.dwell_slots == 0 {
                    return bad(format!("archetype {:?} has a zero dwell time", a.role));
                }
            }
        }
        Ok(())
    }
}

fn cluster(name: &str, category: PoiCategory, share: f64, anchored: bool) -> ClusterSpec {
    ClusterSpec {
        name: name.into(),
        category,
        share,
        anchored,
    }
}

pub fn default_clusters() -> Vec<ClusterSpec> {
    use PoiCategory::*;
    vec![
        cluster("home", CommercialResidential, 0.24, true),
        cluster("work", CompaniesEnterprises, 0.14, true),
        cluster("dining", DiningCuisine, 0.10, false),
        cluster("shopping", ShoppingConsumerGoods, 0.08, false),
        cluster("leisure", LeisureEntertainment, 0.08, false),
        cluster("school", ScienceEducationCulture, 0.06, true),
        cluster("services", LifeServices, 0.06, false),
        cluster("transit", TransportationFacilities, 0.06, false),
        cluster("tourism", TouristAttractions, 0.06, false),
        cluster("hotel", HotelsAccommodations, 0.04, true),
        cluster("sports", SportsFitness, 0.04, false),
        cluster("health", Healthcare, 0.04, false),
    ]
}

fn visits(spec: &[(&str, usize)]) -> Vec<Visit> {
    spec.iter()
        .map(|&(c, d)| Visit {
            cluster: c.into(),
            dwell_slots: d,
        })
        .collect()
}

/// Four daily routines. Within each, no (cluster, slot) pair occurs at two
/// positions, which keeps the next step a function of the current one.
pub fn default_archetypes() -> Vec<Archetype> {
    vec![
        Archetype {
            role: "office worker".into(),
            instruction: "You plan the day of an office worker who commutes to a fixed \
                          workplace on weekdays, eats out at lunch and runs errands after work."
                .into(),
            weight: 0.4,
            start_slots: (14, 17),
            visits: visits(&[
                ("home", 2),
                ("transit", 1),
                ("work", 8),
                ("dining", 2),
                ("work", 6),
                ("transit", 1),
                ("shopping", 2),
                ("dining", 3),
                ("home", 1),
            ]),
        },
        Archetype {
            role: "retiree".into(),
            instruction: "You plan the day of a retiree who stays close to home, uses \
                          neighbourhood services and takes long meals."
                .into(),
            weight: 0.2,
            start_slots: (16, 20),
            visits: visits(&[
                ("home", 3),
                ("services", 2),
                ("dining", 3),
                ("leisure", 3),
                ("home", 4),
                ("shopping", 2),
                ("dining", 3),
                ("services", 2),
                ("home", 1),
            ]),
        },
        Archetype {
            role: "teacher".into(),
            instruction: "You plan the day of a teacher who spends the school day at one \
                          campus and exercises before heading home."
                .into(),
            weight: 0.2,
            start_slots: (13, 15),
            visits: visits(&[
                ("home", 2),
                ("school", 10),
                ("dining", 2),
                ("school", 6),
                ("sports", 3),
                ("shopping", 2),
                ("dining", 3),
                ("leisure", 3),
                ("home", 1),
            ]),
        },
        Archetype {
            role: "visitor".into(),
            instruction: "You plan the day of a visitor staying at a hotel who tours the \
                          main attractions of an unfamiliar city."
                .into(),
            weight: 0.2,
            start_slots: (18, 22),
            visits: visits(&[
                ("hotel", 2),
                ("tourism", 4),
                ("dining", 2),
                ("tourism", 4),
                ("shopping", 3),
                ("dining", 3),
                ("leisure", 3),
                ("transit", 1),
                ("hotel", 1),
            ]),
        },
    ]
}

/// Intended (pre-deviation) itinerary of one synthetic agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannedDay {
    pub archetype: usize,
    /// Cluster index per stay.
    pub clusters: Vec<usize>,
    /// Within-day slot per stay.
    pub slots: Vec<usize>,
    /// Whether the realized stay replaced the planned region.
    pub deviated: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCity {
    pub config: SynthConfig,
    pub map: CityMap,
    pub pois: Vec<PoiRecord>,
    /// Region ids of each cluster, indexed like `config.clusters`.
    pub cluster_regions: Vec<Vec<RegionId>>,
    pub trajectories: Vec<Trajectory>,
    pub plans: Vec<PlannedDay>,
    /// Role name for every agent id.
    pub roles: BTreeMap<String, String>,
}

impl SynthCity {
    /// Planted next step after stay `i` of trajectory `traj`: the cluster category
    /// of the next visit and its within-day slot.
    pub fn planned_next(&self, traj: usize, i: usize) -> Option<(PoiCategory, usize)> {
        let plan = &self.plans[traj];
        let c = *plan.clusters.get(i + 1)?;
        Some((self.config.clusters[c].category, plan.slots[i + 1]))
    }

    pub fn deviation_rate(&self) -> f64 {
        let (dev, total) = self.plans.iter().fold((0usize, 0usize), |(d, t), p| {
            (d + p.deviated.iter().filter(|&&x| x).count(), t + p.deviated.len())
        });
        dev as f64 / total.max(1) as f64
    }

    /// Category of the cluster containing `region`, if any.
    pub fn region_category(&self, region: RegionId) -> Option<PoiCategory> {
        self.cluster_regions
            .iter()
            .position(|rs| rs.contains(&region))
            .map(|c| self.config.clusters[c].category)
    }
}

/// Largest-remainder allocation of `n` items by `shares`, at least one per share.
fn allocate(n: usize, shares: &[f64]) -> Vec<usize> {
    let total: f64 = shares.iter().sum();
    let spare = n - shares.len();
    let exact: Vec<f64> = shares.iter().map(|s| s / total * spare as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().take(spare - assigned) {
        counts[i] += 1;
    }
    counts.iter().map(|c| c + 1).collect()
}

struct Layout {
    center: GeoPoint,
    metric: DistanceMetric,
}

impl Layout {
    fn to_point(&self, x_km: f64, y_km: f64) -> GeoPoint {
        match self.metric {
            DistanceMetric::Planar => GeoPoint::new(self.center.lon + x_km, self.center.lat + y_km),
            DistanceMetric::Haversine => {
                let lat = self.center.lat + y_km / KM_PER_DEGREE;
                let lon = self.center.lon + x_km / (KM_PER_DEGREE * self.center.lat.to_radians().cos());
                GeoPoint::new(lon, lat)
            }
        }
    }
}

/// Generates a city and its trajectories. Output is a pure function of the config.
pub fn synth_city(config: &SynthConfig) -> Result<SynthCity, TrajectoryError> {
    config.validate()?;
    let slotting = config.slotting()?;
    let spd = slotting.slots_per_day();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let layout = Layout {
        center: config.center.unwrap_or(GeoPoint::new(0.0, 0.0)),
        metric: config.metric,
    };

    // Zones and seeds.
    let half = config.extent_km / 2.0;
    let shares: Vec<f64> = config.clusters.iter().map(|c| c.share).collect();
    let sizes = allocate(config.n_regions, &shares);
    let zone_spread = Normal::new(0.0, config.extent_km / 10.0).expect("positive spread");
    let mut seeds_km: Vec<(f64, f64)> = Vec::with_capacity(config.n_regions);
    let mut region_cluster = Vec::with_capacity(config.n_regions);
    let mut cluster_regions = vec![Vec::new(); config.clusters.len()];
    for (c, &size) in sizes.iter().enumerate() {
        let zone = (rng.random_range(-half..half) * 0.8, rng.random_range(-half..half) * 0.8);
        for _ in 0..size {
            let mut attempts = 0;
            let p = loop {
                let x = (zone.0 + zone_spread.sample(&mut rng)).clamp(-half, half);
                let y = (zone.1 + zone_spread.sample(&mut rng)).clamp(-half, half);
                let clear = seeds_km
                    .iter()
                    .all(|&(sx, sy)| (sx - x).hypot(sy - y) >= MIN_SEED_SEPARATION_KM);
                if clear {
                    break (x, y);
                }
                attempts += 1;
                if attempts > 10_000 {
                    return Err(TrajectoryError::InvalidConfig(format!(
                        "cannot place {} regions {MIN_SEED_SEPARATION_KM} km apart in a {} km square",
                        config.n_regions, config.extent_km
                    )));
                }
            };
            cluster_regions[c].push(seeds_km.len());
            region_cluster.push(c);
            seeds_km.push(p);
        }
    }
    let seeds: Vec<GeoPoint> = seeds_km.iter().map(|&(x, y)| layout.to_point(x, y)).collect();
    let partition = build_partition_with(&config.city_id, &seeds, config.metric)?;

    // POIs around each seed, drawn from the region's category mix.
    let poi_noise = Normal::new(0.0, POI_SPREAD_KM).expect("positive spread");
    let mut pois = Vec::new();
    for (r, &(x, y)) in seeds_km.iter().enumerate() {
        let dominant = config.clusters[region_cluster[r]].category.index();
        let noise: Vec<f64> = (0..14).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        let noise_sum: f64 = noise.iter().sum();
        let mix: Vec<f64> = noise
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let base = (1.0 - config.dominant_share) * w / noise_sum;
                if i == dominant {
                    base + config.dominant_share
                } else {
                    base
                }
            })
            .collect();
        let pick = WeightedIndex::new(&mix).expect("mix has positive mass");
        let count = rng.random_range(config.pois_per_region.0..=config.pois_per_region.1);
        for _ in 0..count {
            let p = layout.to_point(x + poi_noise.sample(&mut rng), y + poi_noise.sample(&mut rng));
            pois.push(PoiRecord {
                lon: p.lon,
                lat: p.lat,
                category: PoiCategory::ALL[pick.sample(&mut rng)],
            });
        }
    }
    let map = aggregate_semantics(&pois, &partition);

    // Agents.
    let cluster_index: BTreeMap<&str, usize> = config
        .clusters
        .iter()
        .enumerate()
        .map(|(i, c)| (c.name.as_str(), i))
        .collect();
    let weights: Vec<f64> = config.archetypes.iter().map(|a| a.weight.max(0.0)).collect();
    let pick_role = WeightedIndex::new(&weights).expect("validated weights");
    let width = (config.n_agents.max(1) - 1).to_string().len();
    let mut trajectories = Vec::with_capacity(config.n_agents);
    let mut plans = Vec::with_capacity(config.n_agents);
    let mut roles = BTreeMap::new();
    for agent in 0..config.n_agents {
        let a = pick_role.sample(&mut rng);
        let arch = &config.archetypes[a];
        let anchors: Vec<Option<RegionId>> = config
            .clusters
            .iter()
            .enumerate()
            .map(|(c, spec)| {
                spec.anchored
                    .then(|| cluster_regions[c][rng.random_range(0..cluster_regions[c].len())])
            })
            .collect();
        let day = agent as u64 % config.days;
        let mut slot = rng.random_range(arch.start_slots.0..=arch.start_slots.1);
        let mut plan = PlannedDay {
            archetype: a,
            clusters: Vec::with_capacity(config.k + 1),
            slots: Vec::with_capacity(config.k + 1),
            deviated: Vec::with_capacity(config.k + 1),
        };
        let mut stays = Vec::with_capacity(config.k + 1);
        for visit in &arch.visits[..config.k + 1] {
            let c = cluster_index[visit.cluster.as_str()];
            let planned = anchors[c]
                .unwrap_or_else(|| cluster_regions[c][rng.random_range(0..cluster_regions[c].len())]);
            let deviated = config.deviation > 0.0 && rng.random_bool(config.deviation);
            let region_id = if deviated {
                let other = rng.random_range(0..config.n_regions - 1);
                if other >= planned {
                    other + 1
                } else {
                    other
                }
            } else {
                planned
            };
            let timestamp = config.start_epoch + day * SECONDS_PER_DAY + slot as u64 * slotting.slot_seconds();
            stays.push(StayPoint { region_id, timestamp });
            plan.clusters.push(c);
            plan.slots.push(slot % spd);
            plan.deviated.push(deviated);
            slot += visit.dwell_slots;
        }
        let agent_id = format!("{}-{agent:0width$}", config.city_id);
        roles.insert(agent_id.clone(), arch.role.clone());
        trajectories.push(Trajectory {
            agent_id,
            city_id: config.city_id.clone(),
            stays,
        });
        plans.push(plan);
    }

    Ok(SynthCity {
        config: config.clone(),
        map,
        pois,
        cluster_regions,
        trajectories,
        plans,
        roles,
    })
}
