//! Stay-point trajectories, time slotting, CSV I/O, dataset splits and the
//! synthetic city generator.

mod io;
mod split;
pub mod synth;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{CityMap, GeoError, PoiDistribution, RegionId};

pub use io::{load_trajectories, load_trajectories_checked, save_trajectories};
pub use split::{split_dataset, DatasetSplit};
pub use synth::{synth_city, SynthCity, SynthConfig};

pub const SECONDS_PER_DAY: u64 = 86_400;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("slot length of {0} minutes does not divide a day")]
    InvalidSlotting(u32),
    #[error("malformed rows in {path}: {}", format_lines(.lines))]
    Malformed { path: String, lines: Vec<(u64, String)> },
    #[error("unknown region ids: {}", format_offenders(.0))]
    UnknownRegions(Vec<(String, RegionId)>),
    #[error("agent {agent}: two different regions at timestamp {timestamp}")]
    TimestampInversion { agent: String, timestamp: u64 },
    #[error("trajectory of agent {0} is empty")]
    Empty(String),
    #[error("timestamps of agent {0} are not strictly increasing")]
    NotMonotone(String),
    #[error("need at least {needed} trajectories, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("no city map for city {0}")]
    MissingCity(String),
    #[error("invalid synthetic city config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_lines(lines: &[(u64, String)]) -> String {
    let shown: Vec<String> = lines
        .iter()
        .take(10)
        .map(|(l, m)| format!("line {l}: {m}"))
        .collect();
    let more = lines.len().saturating_sub(10);
    if more > 0 {
        format!("{} (and {more} more)", shown.join("; "))
    } else {
        shown.join("; ")
    }
}

fn format_offenders(items: &[(String, RegionId)]) -> String {
    let shown: Vec<String> = items.iter().take(10).map(|(a, r)| format!("{a}:{r}")).collect();
    let more = items.len().saturating_sub(10);
    if more > 0 {
        format!("{} (and {more} more)", shown.join(", "))
    } else {
        shown.join(", ")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StayPoint {
    pub region_id: RegionId,
    /// Seconds since the Unix epoch, UTC.
    pub timestamp: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub agent_id: String,
    pub city_id: String,
    pub stays: Vec<StayPoint>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.stays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stays.is_empty()
    }

    pub fn regions(&self) -> Vec<RegionId> {
        self.stays.iter().map(|s| s.region_id).collect()
    }

    pub fn is_monotone(&self) -> bool {
        self.stays.windows(2).all(|w| w[0].timestamp < w[1].timestamp)
    }

    /// Checks monotonicity and, when a map is given, that every region exists.
    pub fn validate(&self, map: Option<&CityMap>) -> Result<(), TrajectoryError> {
        if self.stays.is_empty() {
            return Err(TrajectoryError::Empty(self.agent_id.clone()));
        }
        if !self.is_monotone() {
            return Err(TrajectoryError::NotMonotone(self.agent_id.clone()));
        }
        if let Some(map) = map {
            let bad: Vec<(String, RegionId)> = self
                .stays
                .iter()
                .filter(|s| !map.contains(s.region_id))
                .map(|s| (self.agent_id.clone(), s.region_id))
                .collect();
            if !bad.is_empty() {
                return Err(TrajectoryError::UnknownRegions(bad));
            }
        }
        Ok(())
    }

    /// Forces the trajectory to exactly `len` stays.
    ///
    /// Longer trajectories are truncated. Shorter ones repeat the final region at
    /// successive slot boundaries; the returned mask is `false` on padded steps.
    pub fn fit_length(&self, len: usize, slotting: TimeSlotting) -> (Trajectory, Vec<bool>) {
        let mut stays: Vec<StayPoint> = self.stays.iter().take(len).copied().collect();
        let mut mask = vec![true; stays.len()];
        if let Some(&last) = stays.last() {
            let step = slotting.slot_seconds();
            let mut ts = last.timestamp;
            while stays.len() < len {
                ts = (ts / step + 1) * step;
                stays.push(StayPoint {
                    region_id: last.region_id,
                    timestamp: ts,
                });
                mask.push(false);
            }
        }
        (
            Trajectory {
                agent_id: self.agent_id.clone(),
                city_id: self.city_id.clone(),
                stays,
            },
            mask,
        )
    }
}

/// Discretization of the day into equal slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeSlotting {
    slot_minutes: u32,
}

impl Default for TimeSlotting {
    fn default() -> Self {
        Self { slot_minutes: 30 }
    }
}

impl TimeSlotting {
    pub fn new(slot_minutes: u32) -> Result<Self, TrajectoryError> {
        if slot_minutes == 0 || 1440 % slot_minutes != 0 {
            return Err(TrajectoryError::InvalidSlotting(slot_minutes));
        }
        Ok(Self { slot_minutes })
    }

    pub fn slot_minutes(self) -> u32 {
        self.slot_minutes
    }

    pub fn slots_per_day(self) -> usize {
        (1440 / self.slot_minutes) as usize
    }

    pub fn slot_seconds(self) -> u64 {
        u64::from(self.slot_minutes) * 60
    }

    /// Within-day slot of a timestamp.
    pub fn slot_of(self, timestamp: u64) -> usize {
        ((timestamp % SECONDS_PER_DAY) / self.slot_seconds()) as usize
    }

    /// Slot counted from the epoch, so consecutive days continue the numbering.
    pub fn absolute_slot(self, timestamp: u64) -> u64 {
        timestamp / self.slot_seconds()
    }

    pub fn slot_start(self, absolute_slot: u64) -> u64 {
        absolute_slot * self.slot_seconds()
    }

    /// `HH:MM` at the start of a within-day slot.
    pub fn clock_label(self, slot: usize) -> String {
        let minutes = slot as u32 * self.slot_minutes;
        format!("{:02}:{:02}", minutes / 60 % 24, minutes % 60)
    }
}

/// Within-day slot index of `timestamp`.
pub fn discretize_time(timestamp: u64, slotting: TimeSlotting) -> usize {
    slotting.slot_of(timestamp)
}

/// Replaces every stay with its region's POI distribution.
pub fn trajectory_to_poi_sequence(
    traj: &Trajectory,
    map: &CityMap,
) -> Result<Vec<PoiDistribution>, TrajectoryError> {
    traj.stays
        .iter()
        .map(|s| map.semantics_of(s.region_id).copied().map_err(Into::into))
        .collect()
}

#[cfg(test)]
mod tests;
