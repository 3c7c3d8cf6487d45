use std::collections::BTreeMap;
use std::path::Path;

use super::{StayPoint, Trajectory, TrajectoryError};
use crate::geo::{CityMap, RegionId};

const HEADER: [&str; 4] = ["agent_id", "city_id", "timestamp", "region_id"];

/// Reads a trajectory CSV. Rows are grouped per (city, agent) and time-sorted.
///
/// Exact duplicate rows are dropped. Two rows of one agent with the same timestamp
/// but different regions are rejected, as is any malformed row (all malformed line
/// numbers are reported together).
pub fn load_trajectories(path: &Path) -> Result<Vec<Trajectory>, TrajectoryError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != HEADER {
        return Err(TrajectoryError::Malformed {
            path: path.display().to_string(),
            lines: vec![(1, format!("expected header {HEADER:?}, found {header:?}"))],
        });
    }

    let mut groups: BTreeMap<(String, String), Vec<StayPoint>> = BTreeMap::new();
    let mut malformed = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        let line = rdr.position().line();
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                malformed.push((line, e.to_string()));
                continue;
            }
        }
        let line = record.position().map_or(line, |p| p.line());
        if record.len() != 4 {
            malformed.push((line, format!("expected 4 fields, found {}", record.len())));
            continue;
        }
        let agent = record[0].to_string();
        let city = record[1].to_string();
        let ts = record[2].parse::<u64>();
        let region = record[3].parse::<RegionId>();
        match (ts, region) {
            (Ok(timestamp), Ok(region_id)) if !agent.is_empty() && !city.is_empty() => groups
                .entry((city, agent))
                .or_default()
                .push(StayPoint { region_id, timestamp }),
            (Err(e), _) => malformed.push((line, format!("timestamp {:?}: {e}", &record[2]))),
            (_, Err(e)) => malformed.push((line, format!("region_id {:?}: {e}", &record[3]))),
            _ => malformed.push((line, "empty agent_id or city_id".into())),
        }
    }
    if !malformed.is_empty() {
        return Err(TrajectoryError::Malformed {
            path: path.display().to_string(),
            lines: malformed,
        });
    }

    let mut out = Vec::with_capacity(groups.len());
    for ((city_id, agent_id), mut stays) in groups {
        stays.sort_unstable_by_key(|s| (s.timestamp, s.region_id));
        stays.dedup();
        if let Some(w) = stays.windows(2).find(|w| w[0].timestamp == w[1].timestamp) {
            return Err(TrajectoryError::TimestampInversion {
                agent: agent_id,
                timestamp: w[0].timestamp,
            });
        }
        out.push(Trajectory {
            agent_id,
            city_id,
            stays,
        });
    }
    Ok(out)
}

/// Like [`load_trajectories`], additionally requiring every region id to exist in
/// the map of the trajectory's city.
pub fn load_trajectories_checked(
    path: &Path,
    maps: &BTreeMap<String, CityMap>,
) -> Result<Vec<Trajectory>, TrajectoryError> {
    let trajs = load_trajectories(path)?;
    let mut offenders = Vec::new();
    for t in &trajs {
        let map = maps
            .get(&t.city_id)
            .ok_or_else(|| TrajectoryError::MissingCity(t.city_id.clone()))?;
        offenders.extend(
            t.stays
                .iter()
                .filter(|s| !map.contains(s.region_id))
                .map(|s| (t.agent_id.clone(), s.region_id)),
        );
    }
    if offenders.is_empty() {
        Ok(trajs)
    } else {
        Err(TrajectoryError::UnknownRegions(offenders))
    }
}

pub fn save_trajectories(path: &Path, trajs: &[Trajectory]) -> Result<(), TrajectoryError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HEADER)?;
    for t in trajs {
        for s in &t.stays {
            w.write_record([
                t.agent_id.as_str(),
                t.city_id.as_str(),
                &s.timestamp.to_string(),
                &s.region_id.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
