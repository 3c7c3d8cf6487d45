use mobiforge_autodiff::{Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::{PlannerError, PlannerResponse};
use crate::geo::{PoiDistribution, NUM_POI_CATEGORIES};

/// Weight of the arrival-time term relative to the POI term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerLossConfig {
    pub lambda: f64,
}

impl Default for PlannerLossConfig {
    fn default() -> Self {
        Self { lambda: 1.0 }
    }
}

impl PlannerLossConfig {
    pub fn new(lambda: f64) -> Result<Self, PlannerError> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(PlannerError::Config(format!("lambda must be >= 0, got {lambda}")));
        }
        Ok(Self { lambda })
    }
}

/// Ground truth for one planner query.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannerTarget {
    pub y_time: Vec<f64>,
    pub y_poi: PoiDistribution,
}

impl PlannerTarget {
    /// One-hot arrival slot, optionally smoothed: `(1 − ε)·onehot + ε/S`.
    pub fn new(slot: usize, slots_per_day: usize, y_poi: PoiDistribution, smoothing: f64) -> Self {
        let base = smoothing / slots_per_day as f64;
        let mut y_time = vec![base; slots_per_day];
        y_time[slot] += 1.0 - smoothing;
        Self { y_time, y_poi }
    }
}

/// Batch-mean `KL(y_poi ‖ softmax(poi)) + λ·KL(y_time ‖ softmax(time))` on a graph.
///
/// Logits are `[batch, 14]` and `[batch, slots]`; targets have matching shapes.
pub fn planner_loss_graph<T: Real>(
    g: &mut Graph<'_, T>,
    time_logits: Var,
    poi_logits: Var,
    y_time: &Tensor<T>,
    y_poi: &Tensor<T>,
    lambda: f64,
) -> mobiforge_autodiff::Result<Var> {
    let lp_poi = g.log_softmax(poi_logits, 1)?;
    let poi_term = g.kl_div(lp_poi, y_poi)?;
    if lambda == 0.0 {
        return Ok(poi_term);
    }
    let lp_time = g.log_softmax(time_logits, 1)?;
    let time_term = g.kl_div(lp_time, y_time)?;
    let weighted = g.scale(time_term, lambda)?;
    g.add(poi_term, weighted)
}

/// Loss of a single response in double precision.
pub fn planner_loss(
    resp: &PlannerResponse,
    target: &PlannerTarget,
    cfg: PlannerLossConfig,
) -> Result<f64, PlannerError> {
    let slots = target.y_time.len();
    resp.validate(slots)?;
    let sum: f64 = target.y_time.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || target.y_time.iter().any(|&p| p < 0.0) {
        return Err(PlannerError::InvalidTarget(format!(
            "y_time is not a probability vector (sum {sum})"
        )));
    }
    let mut g = Graph::<f64>::new();
    let time = g.input(Tensor::new(vec![1, slots], resp.time_logits.clone())?);
    let poi = g.input(Tensor::new(vec![1, NUM_POI_CATEGORIES], resp.poi_logits.clone())?);
    let y_time = Tensor::new(vec![1, slots], target.y_time.clone())?;
    let y_poi = Tensor::new(vec![1, NUM_POI_CATEGORIES], target.y_poi.weights().to_vec())?;
    let loss = planner_loss_graph(&mut g, time, poi, &y_time, &y_poi, cfg.lambda)?;
    Ok(g.value(loss).item())
}
