//! Recursive travel planning over pluggable inference backends.
//!
//! A backend maps the current time and the POI distribution of the current region
//! to logits over the next arrival slot and the destination's POI categories.
//! [`plan`] calls it repeatedly, feeding each predicted distribution back in, and
//! returns the per-step distributions that condition the generator.

mod loss;
pub mod mock;
mod neural;
mod prompt;
mod remote;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{CityMap, GeoError, PoiDistribution, RegionId, NUM_POI_CATEGORIES};
use crate::trajectory::TimeSlotting;

pub use loss::{planner_loss, planner_loss_graph, PlannerLossConfig, PlannerTarget};
pub use neural::{
    planner_examples, train_neural_backend, NeuralPlanner, NeuralPlannerConfig, PlannerExample,
    PlannerTrainConfig,
};
pub use prompt::{default_instruction, prompt_percentages, render_prompt};
pub use remote::{RemoteConfig, RemotePlanner, WireRequest, WireResponse};

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("{field} has length {got}, expected {expected}")]
    Shape {
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{0} contains non-finite values")]
    NonFinite(&'static str),
    #[error("invalid target: {0}")]
    InvalidTarget(String),
    #[error("planning needs at least one step")]
    ZeroSteps,
    #[error("planner step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<PlannerError>,
    },
    #[error("request timed out after {0} ms")]
    Timeout(u64),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("server answered HTTP {0}")]
    Status(u16),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: usize, last: Box<PlannerError> },
    #[error("empty training set")]
    EmptyDataset,
    #[error("unknown role {0:?}")]
    UnknownRole(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Tensor(#[from] mobiforge_autodiff::TensorError),
}

/// A traveller role with the instruction text shown to text-based backends.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleProfile {
    pub name: String,
    pub instruction: String,
}

impl RoleProfile {
    pub fn new(name: &str, instruction: &str) -> Result<Self, PlannerError> {
        if instruction.trim().is_empty() {
            return Err(PlannerError::Config(format!("role {name:?} has an empty instruction")));
        }
        Ok(Self {
            name: name.to_string(),
            instruction: instruction.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlannerQuery {
    /// Within-day slot.
    pub current_slot: usize,
    /// Days elapsed since the plan started.
    pub day_offset: u32,
    pub current_semantics: PoiDistribution,
    pub role: Option<RoleProfile>,
    pub dataset_tag: String,
    pub slotting: TimeSlotting,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerResponse {
    pub time_logits: Vec<f64>,
    pub poi_logits: Vec<f64>,
}

impl PlannerResponse {
    /// Checks vector lengths and finiteness.
    pub fn validate(&self, slots_per_day: usize) -> Result<(), PlannerError> {
        if self.time_logits.len() != slots_per_day {
            return Err(PlannerError::Shape {
                field: "time_logits",
                expected: slots_per_day,
                got: self.time_logits.len(),
            });
        }
        if self.poi_logits.len() != NUM_POI_CATEGORIES {
            return Err(PlannerError::Shape {
                field: "poi_logits",
                expected: NUM_POI_CATEGORIES,
                got: self.poi_logits.len(),
            });
        }
        if !self.time_logits.iter().all(|x| x.is_finite()) {
            return Err(PlannerError::NonFinite("time_logits"));
        }
        if !self.poi_logits.iter().all(|x| x.is_finite()) {
            return Err(PlannerError::NonFinite("poi_logits"));
        }
        Ok(())
    }
}

/// Numerically stable softmax in double precision.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Anything that turns a query into next-step logits. Implementations must be
/// safe to share between threads.
pub trait PlannerBackend: Send + Sync {
    /// Stable identifier recorded in generation manifests.
    fn id(&self) -> String;
    fn slots_per_day(&self) -> usize;
    fn infer(&self, query: &PlannerQuery) -> Result<PlannerResponse, PlannerError>;
}

/// When the recursion stops.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Horizon {
    /// Exactly `k` steps.
    #[default]
    Steps,
    /// Stop once the clock passes `start + k` slots, and after at most `k` steps.
    Clock,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlanOptions {
    pub role: Option<RoleProfile>,
    pub dataset_tag: String,
    pub horizon: Horizon,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanWarning {
    pub step: usize,
    pub message: String,
}

/// Per-step temporal and semantic distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TravelPlan {
    /// Slot distribution of each step (length `slots_per_day`).
    pub temporal: Vec<Vec<f64>>,
    pub semantic: Vec<PoiDistribution>,
    /// Arrival slot of each step counted from midnight of the start day, so values
    /// above `slots_per_day` fall on later days. Strictly increasing.
    pub arrival_slots: Vec<u64>,
    pub start_slot: usize,
    pub steps: usize,
    pub warnings: Vec<PlanWarning>,
}

/// Runs the planning recursion from `start_slot` in `start_region`.
///
/// Each step queries the backend with the current clock and semantics, stores the
/// softmax of both heads, and moves the clock to the argmax slot. A predicted slot
/// earlier than the current one is read as the next day; an equal one is advanced
/// by one slot and reported as a warning, so the clock always moves forward.
pub fn plan(
    start_slot: usize,
    start_region: RegionId,
    map: &CityMap,
    k: usize,
    slotting: TimeSlotting,
    backend: &dyn PlannerBackend,
    options: &PlanOptions,
) -> Result<TravelPlan, PlannerError> {
    let start = *map.semantics_of(start_region)?;
    plan_from_semantics(start_slot, start, k, slotting, backend, options)
}

/// [`plan`] starting from explicit semantics instead of a region.
pub fn plan_from_semantics(
    start_slot: usize,
    start_semantics: PoiDistribution,
    k: usize,
    slotting: TimeSlotting,
    backend: &dyn PlannerBackend,
    options: &PlanOptions,
) -> Result<TravelPlan, PlannerError> {
    if k == 0 {
        return Err(PlannerError::ZeroSteps);
    }
    let spd = slotting.slots_per_day();
    if start_slot >= spd {
        return Err(PlannerError::Config(format!(
            "start slot {start_slot} outside a {spd}-slot day"
        )));
    }
    if backend.slots_per_day() != spd {
        return Err(PlannerError::Config(format!(
            "backend predicts {} slots per day, slotting has {spd}",
            backend.slots_per_day()
        )));
    }
    let mut out = TravelPlan {
        temporal: Vec::with_capacity(k),
        semantic: Vec::with_capacity(k),
        arrival_slots: Vec::with_capacity(k),
        start_slot,
        steps: 0,
        warnings: Vec::new(),
    };
    let spd64 = spd as u64;
    let mut clock = start_slot as u64;
    let t_max = clock + k as u64;
    let mut semantics = start_semantics;
    while out.steps < k && (options.horizon == Horizon::Steps || clock <= t_max) {
        let step = out.steps;
        let query = PlannerQuery {
            current_slot: (clock % spd64) as usize,
            day_offset: (clock / spd64) as u32,
            current_semantics: semantics,
            role: options.role.clone(),
            dataset_tag: options.dataset_tag.clone(),
            slotting,
        };
        let wrap = |source| PlannerError::Step {
            step,
            source: Box::new(source),
        };
        let resp = backend.infer(&query).map_err(wrap)?;
        resp.validate(spd).map_err(wrap)?;
        let time = softmax(&resp.time_logits);
        let poi = PoiDistribution::normalized(&softmax(&resp.poi_logits))?;

        let predicted = mobiforge_autodiff::argmax(&time) as u64;
        let current = clock % spd64;
        let day_start = clock - current;
        clock = if predicted > current {
            day_start + predicted
        } else if predicted < current {
            day_start + spd64 + predicted
        } else {
            out.warnings.push(PlanWarning {
                step,
                message: format!("predicted slot {predicted} does not advance the clock; forced +1"),
            });
            clock + 1
        };
        out.temporal.push(time);
        out.semantic.push(poi);
        out.arrival_slots.push(clock);
        out.steps += 1;
        semantics = poi;
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
