//! Cities as discrete Voronoi partitions with a POI distribution per region.
//!
//! A partition is defined entirely by its seed points: a location belongs to the
//! region whose seed is nearest, ties going to the lower region id. No polygons
//! are ever built.

mod category;
mod io;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use category::{PoiCategory, PoiDistribution, NUM_POI_CATEGORIES, SIMPLEX_TOL};
pub use io::{load_city_map, read_pois_csv, read_seeds_csv, save_city_map, write_pois_csv};

/// Mean Earth radius used by the haversine distance.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

pub type RegionId = usize;

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("a city needs at least one seed")]
    NoSeeds,
    #[error("duplicate seed points at indices {0:?}")]
    DuplicateSeeds(Vec<(usize, usize)>),
    #[error("coordinate out of range: lon {lon}, lat {lat}")]
    InvalidCoordinate { lon: f64, lat: f64 },
    #[error("unknown region id {0}")]
    UnknownRegion(RegionId),
    #[error("unknown POI category label {0:?}")]
    UnknownCategory(String),
    #[error("invalid POI distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid city map: {0}")]
    InvalidMap(String),
    #[error("{path}: line {line}: {msg}")]
    Parse { path: String, line: u64, msg: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Longitude/latitude in degrees, or planar kilometres under [`DistanceMetric::Planar`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lon: f64,
    pub lat: f64,
}

impl GeoPoint {
    pub fn new(lon: f64, lat: f64) -> Self {
        Self { lon, lat }
    }

    pub fn validate(self) -> Result<Self, GeoError> {
        let ok = self.lon.is_finite()
            && self.lat.is_finite()
            && (-180.0..=180.0).contains(&self.lon)
            && (-90.0..=90.0).contains(&self.lat);
        if ok {
            Ok(self)
        } else {
            Err(GeoError::InvalidCoordinate {
                lon: self.lon,
                lat: self.lat,
            })
        }
    }
}

/// Great-circle distance in kilometres.
pub fn haversine_km(a: GeoPoint, b: GeoPoint) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    #[default]
    Haversine,
    /// Coordinates are already kilometres on a plane (synthetic cities).
    Planar,
}

impl DistanceMetric {
    pub fn distance_km(self, a: GeoPoint, b: GeoPoint) -> f64 {
        match self {
            DistanceMetric::Haversine => haversine_km(a, b),
            DistanceMetric::Planar => (a.lon - b.lon).hypot(a.lat - b.lat),
        }
    }

    fn is_default(&self) -> bool {
        *self == DistanceMetric::Haversine
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub region_id: RegionId,
    pub seed: GeoPoint,
    pub centroid: GeoPoint,
    /// Number of POIs assigned by the last [`aggregate_semantics`] call.
    #[serde(default)]
    pub poi_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CityMap {
    pub city_id: String,
    #[serde(default, skip_serializing_if = "DistanceMetric::is_default")]
    pub metric: DistanceMetric,
    pub regions: Vec<Region>,
    pub semantics: BTreeMap<RegionId, PoiDistribution>,
}

/// Builds a partition with one region per seed; region ids follow input order.
pub fn build_partition(city_id: &str, seeds: &[GeoPoint]) -> Result<CityMap, GeoError> {
    build_partition_with(city_id, seeds, DistanceMetric::Haversine)
}

pub fn build_partition_with(
    city_id: &str,
    seeds: &[GeoPoint],
    metric: DistanceMetric,
) -> Result<CityMap, GeoError> {
    if seeds.is_empty() {
        return Err(GeoError::NoSeeds);
    }
    if metric == DistanceMetric::Haversine {
        for s in seeds {
            s.validate()?;
        }
    }
    let mut order: Vec<usize> = (0..seeds.len()).collect();
    order.sort_by(|&i, &j| {
        seeds[i]
            .lon
            .total_cmp(&seeds[j].lon)
            .then(seeds[i].lat.total_cmp(&seeds[j].lat))
            .then(i.cmp(&j))
    });
    let duplicates: Vec<(usize, usize)> = order
        .windows(2)
        .filter(|w| seeds[w[0]] == seeds[w[1]])
        .map(|w| (w[0].min(w[1]), w[0].max(w[1])))
        .collect();
    if !duplicates.is_empty() {
        return Err(GeoError::DuplicateSeeds(duplicates));
    }
    let regions = seeds
        .iter()
        .enumerate()
        .map(|(i, &s)| Region {
            region_id: i,
            seed: s,
            centroid: s,
            poi_count: 0,
        })
        .collect();
    let semantics = (0..seeds.len()).map(|i| (i, PoiDistribution::uniform())).collect();
    Ok(CityMap {
        city_id: city_id.to_string(),
        metric,
        regions,
        semantics,
    })
}

impl CityMap {
    pub fn num_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn region(&self, id: RegionId) -> Result<&Region, GeoError> {
        self.regions.get(id).ok_or(GeoError::UnknownRegion(id))
    }

    pub fn contains(&self, id: RegionId) -> bool {
        id < self.regions.len()
    }

    pub fn semantics_of(&self, id: RegionId) -> Result<&PoiDistribution, GeoError> {
        self.semantics.get(&id).ok_or(GeoError::UnknownRegion(id))
    }

    pub fn distance_km(&self, a: GeoPoint, b: GeoPoint) -> f64 {
        self.metric.distance_km(a, b)
    }

    /// Checks the structural invariants of a deserialized map.
    pub fn validate(&self) -> Result<(), GeoError> {
        if self.regions.is_empty() {
            return Err(GeoError::NoSeeds);
        }
        for (i, r) in self.regions.iter().enumerate() {
            if r.region_id != i {
                return Err(GeoError::InvalidMap(format!(
                    "region at position {i} has id {}; ids must be 0..n in order",
                    r.region_id
                )));
            }
            if !self.semantics.contains_key(&i) {
                return Err(GeoError::InvalidMap(format!("region {i} has no semantics entry")));
            }
        }
        if let Some(extra) = self.semantics.keys().find(|&&k| k >= self.regions.len()) {
            return Err(GeoError::InvalidMap(format!(
                "semantics entry for unknown region {extra}"
            )));
        }
        let seeds: Vec<GeoPoint> = self.regions.iter().map(|r| r.seed).collect();
        build_partition_with(&self.city_id, &seeds, self.metric).map(|_| ())
    }
}

/// Nearest-seed region for `point`; equidistant seeds resolve to the lower id.
pub fn assign_region(point: GeoPoint, map: &CityMap) -> RegionId {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for r in &map.regions {
        let d = map.metric.distance_km(point, r.seed);
        if d < best_d {
            best_d = d;
            best = r.region_id;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoiRecord {
    pub lon: f64,
    pub lat: f64,
    pub category: PoiCategory,
}

impl PoiRecord {
    pub fn point(&self) -> GeoPoint {
        GeoPoint::new(self.lon, self.lat)
    }
}

/// Recomputes every region's POI distribution, count and centroid from `pois`.
///
/// Regions without POIs get the uniform distribution and keep their seed as centroid.
pub fn aggregate_semantics(pois: &[PoiRecord], map: &CityMap) -> CityMap {
    let n = map.num_regions();
    let mut counts = vec![[0usize; NUM_POI_CATEGORIES]; n];
    let mut sums = vec![(0.0f64, 0.0f64); n];
    for p in pois {
        let r = assign_region(p.point(), map);
        counts[r][p.category.index()] += 1;
        sums[r].0 += p.lon;
        sums[r].1 += p.lat;
    }
    let mut out = map.clone();
    for (i, region) in out.regions.iter_mut().enumerate() {
        let total: usize = counts[i].iter().sum();
        region.poi_count = total;
        region.centroid = if total == 0 {
            region.seed
        } else {
            GeoPoint::new(sums[i].0 / total as f64, sums[i].1 / total as f64)
        };
        out.semantics.insert(i, PoiDistribution::from_counts(&counts[i]));
    }
    out
}

/// Distance between region centroids in kilometres.
pub fn region_distance(a: RegionId, b: RegionId, map: &CityMap) -> Result<f64, GeoError> {
    let ra = map.region(a)?;
    let rb = map.region(b)?;
    Ok(map.distance_km(ra.centroid, rb.centroid))
}
