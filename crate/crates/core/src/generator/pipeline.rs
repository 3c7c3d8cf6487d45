//! From a start anchor to a generated trajectory: plan, sample, decode.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Condition, GenError, GenExample, Generator};
use crate::embedding::{semantics_of, EmbedError, SpatialModel};
use crate::geo::{CityMap, PoiDistribution, RegionId};
use crate::planner::{plan, PlanOptions, PlannerBackend, PlannerError, RoleProfile, TravelPlan};
use crate::trajectory::{StayPoint, TimeSlotting, Trajectory, SECONDS_PER_DAY};

/// What the generator is conditioned on at sampling time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanSource {
    /// Planner forecasts.
    #[default]
    Planner,
    /// Uniform plans (for models trained without guidance). Arrival times still
    /// come from the planner.
    Uniform,
}

/// Everything needed to turn a request into a trajectory.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub planner: &'a dyn PlannerBackend,
    pub embedding: &'a SpatialModel,
    pub generator: &'a Generator,
    pub slotting: TimeSlotting,
    /// Planned steps; trajectories have `k + 1` stays.
    pub k: usize,
    pub plan_source: PlanSource,
    pub dataset_tag: &'a str,
    /// Worker threads for planning (useful with a remote backend).
    pub jobs: usize,
    /// Pin step 0 of every sample to the encoding of the start region.
    pub anchor_start: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub agent_id: String,
    pub start_region: RegionId,
    pub start_time: u64,
    pub role: Option<RoleProfile>,
}

#[derive(Debug, thiserror::Error)]
pub enum GenerateError {
    #[error("planning for {agent}: {source}")]
    Planning { agent: String, source: PlannerError },
    #[error("sampling: {0}")]
    Sampling(#[from] GenError),
    #[error("decoding: {0}")]
    Decoding(#[from] EmbedError),
    #[error("invalid request for {agent}: {msg}")]
    Request { agent: String, msg: String },
}

/// Provenance written next to every generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationManifest {
    pub seed: u64,
    pub config_hash: String,
    pub planner_backend: String,
    pub city: String,
    pub count: usize,
    pub plan_source: PlanSource,
}

fn plan_one(req: &GenerationRequest, map: &CityMap, models: &Models<'_>) -> Result<(TravelPlan, PoiDistribution), GenerateError> {
    let agent = req.agent_id.clone();
    let start = *map
        .semantics_of(req.start_region)
        .map_err(|e| GenerateError::Request {
            agent: agent.clone(),
            msg: e.to_string(),
        })?;
    let options = PlanOptions {
        role: req.role.clone(),
        dataset_tag: models.dataset_tag.to_string(),
        ..PlanOptions::default()
    };
    let slot = models.slotting.slot_of(req.start_time);
    let p = plan(slot, req.start_region, map, models.k, models.slotting, models.planner, &options)
        .map_err(|source| GenerateError::Planning { agent, source })?;
    Ok((p, start))
}

fn plan_all(reqs: &[GenerationRequest], map: &CityMap, models: &Models<'_>) -> Result<Vec<(TravelPlan, PoiDistribution)>, GenerateError> {
    let jobs = models.jobs.clamp(1, reqs.len().max(1));
    if jobs == 1 {
        return reqs.iter().map(|r| plan_one(r, map, models)).collect();
    }
    let chunk = reqs.len().div_ceil(jobs);
    std::thread::scope(|s| {
        let handles: Vec<_> = reqs
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|r| plan_one(r, map, models)).collect::<Result<Vec<_>, _>>()))
            .collect();
        let mut out = Vec::with_capacity(reqs.len());
        for h in handles {
            out.extend(h.join().expect("planning thread panicked")?);
        }
        Ok(out)
    })
}

/// Generates one trajectory per request. Request `i` samples with seed `seed ^ i`,
/// so a batch reproduces the single-request results for the same derived seeds.
pub fn generate_batch(
    reqs: &[GenerationRequest],
    map: &CityMap,
    models: &Models<'_>,
    seed: u64,
) -> Result<Vec<Trajectory>, GenerateError> {
    if reqs.is_empty() {
        return Ok(Vec::new());
    }
    let decoder = models.embedding.decoder(&map.city_id)?;
    let spd = models.slotting.slots_per_day();
    let plans = plan_all(reqs, map, models)?;
    let conds: Vec<Condition> = plans
        .iter()
        .map(|(p, start)| match models.plan_source {
            PlanSource::Planner => Condition::from_plan(p, *start, spd),
            PlanSource::Uniform => Condition::uniform(*start, p.steps + 1, spd),
        })
        .collect();
    let conds = if models.anchor_start {
        let starts: Vec<[PoiDistribution; 1]> = plans.iter().map(|(_, s)| [*s]).collect();
        let seqs: Vec<&[PoiDistribution]> = starts.iter().map(|s| s.as_slice()).collect();
        let rows = models.embedding.encode_batch(&seqs)?;
        conds.into_iter().zip(rows).map(|(c, z)| c.with_anchor(z.data().to_vec())).collect()
    } else {
        conds
    };
    let seeds: Vec<u64> = (0..reqs.len() as u64).map(|i| seed ^ i).collect();
    let latents = models.generator.sample(&conds, &seeds)?;

    let step = models.slotting.slot_seconds();
    reqs.iter()
        .zip(&plans)
        .zip(&latents)
        .map(|((req, (p, _)), z)| {
            let regions = decoder.decode(z)?;
            let midnight = req.start_time - req.start_time % SECONDS_PER_DAY;
            let mut stays = vec![StayPoint {
                region_id: req.start_region,
                timestamp: req.start_time,
            }];
            for (i, &slot) in p.arrival_slots.iter().enumerate() {
                stays.push(StayPoint {
                    region_id: regions[i + 1],
                    timestamp: midnight + slot * step,
                });
            }
            Ok(Trajectory {
                agent_id: req.agent_id.clone(),
                city_id: map.city_id.clone(),
                stays,
            })
        })
        .collect()
}

/// Single-request form of [`generate_batch`] (uses `seed` unchanged).
pub fn generate_trajectory(req: &GenerationRequest, map: &CityMap, models: &Models<'_>, seed: u64) -> Result<Trajectory, GenerateError> {
    Ok(generate_batch(std::slice::from_ref(req), map, models, seed)?.remove(0))
}

/// Where training conditions come from.
#[derive(Clone, Copy)]
pub enum ConditionSource<'a> {
    /// Ground-truth arrival slots and visited-region semantics.
    Teacher,
    /// No guidance beyond the start region.
    Uniform,
    /// The planner's forecast from each trajectory's first stay, exactly as at
    /// generation time. Roles are looked up by agent id.
    Planner {
        backend: &'a dyn PlannerBackend,
        roles: &'a BTreeMap<String, RoleProfile>,
        dataset_tag: &'a str,
    },
}

/// Encodes trajectories and pairs each latent with a training condition.
pub fn generator_examples(
    trajs: &[Trajectory],
    maps: &BTreeMap<String, CityMap>,
    embedding: &SpatialModel,
    slotting: TimeSlotting,
    source: ConditionSource<'_>,
) -> Result<Vec<GenExample>, GenerateError> {
    let spd = slotting.slots_per_day();
    let mut sems = Vec::with_capacity(trajs.len());
    for t in trajs.iter().filter(|t| !t.stays.is_empty()) {
        let map = maps.get(&t.city_id).ok_or_else(|| EmbedError::UnknownCity(t.city_id.clone()))?;
        sems.push((t, map, semantics_of(t, map)?));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, (_, _, s)) in sems.iter().enumerate() {
        groups.entry(s.len()).or_default().push(i);
    }
    let mut latents = vec![None; sems.len()];
    for idx in groups.values() {
        for chunk in idx.chunks(512) {
            let seqs: Vec<&[PoiDistribution]> = chunk.iter().map(|&i| sems[i].2.as_slice()).collect();
            for (z, &i) in embedding.encode_batch(&seqs)?.into_iter().zip(chunk) {
                latents[i] = Some(z);
            }
        }
    }
    sems.iter()
        .zip(latents)
        .map(|((t, map, s), z)| {
            let condition = match source {
                ConditionSource::Teacher => {
                    let slots: Vec<usize> = t.stays.iter().map(|st| slotting.slot_of(st.timestamp)).collect();
                    Condition::teacher(&slots, s, spd)
                }
                ConditionSource::Uniform => Condition::uniform(s[0], s.len(), spd),
                ConditionSource::Planner { backend, roles, dataset_tag } => {
                    let options = PlanOptions {
                        role: roles.get(&t.agent_id).cloned(),
                        dataset_tag: dataset_tag.to_string(),
                        ..PlanOptions::default()
                    };
                    let first = &t.stays[0];
                    let p = plan(slotting.slot_of(first.timestamp), first.region_id, map, s.len() - 1, slotting, backend, &options)
                        .map_err(|source| GenerateError::Planning {
                            agent: t.agent_id.clone(),
                            source,
                        })?;
                    Condition::from_plan(&p, s[0], spd)
                }
            };
            Ok(GenExample {
                latent: z.expect("every sequence encoded"),
                condition,
            })
        })
        .collect()
}
