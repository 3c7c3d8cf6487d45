use std::fmt::Write;

use super::PlannerQuery;
use crate::geo::{PoiCategory, PoiDistribution, NUM_POI_CATEGORIES};

/// Task instruction used when the query carries no role.
pub fn default_instruction(dataset_tag: &str) -> &'static str {
    match dataset_tag {
        "private_car" => {
            "You are a travel planner for private car trips. From the current time and the \
             mix of places around the driver, predict when the car arrives at its next stop \
             and what kind of area that stop is."
        }
        "mobile_phone" => {
            "You are a travel planner for mobile phone users. From the current time and the \
             mix of places around the user, predict when the user reaches the next location \
             and what kind of area it is."
        }
        _ => {
            "You are a travel planner. From the current time and the mix of places around \
             the traveller, predict the next arrival time and what kind of area the next \
             destination is."
        }
    }
}

/// Integer percentages summing to exactly 100 (largest-remainder rounding; ties
/// go to the lower category index).
pub fn prompt_percentages(d: &PoiDistribution) -> [u32; NUM_POI_CATEGORIES] {
    let exact: Vec<f64> = d.weights().iter().map(|w| w * 100.0).collect();
    let mut out = [0u32; NUM_POI_CATEGORIES];
    for (o, e) in out.iter_mut().zip(&exact) {
        *o = e.floor() as u32;
    }
    let assigned: u32 = out.iter().sum();
    let mut order: Vec<usize> = (0..NUM_POI_CATEGORIES).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(100u32.saturating_sub(assigned) as usize) {
        out[i] += 1;
    }
    out
}

/// Text prompt for language-model backends. Output depends only on the query.
pub fn render_prompt(query: &PlannerQuery) -> String {
    let instruction = query
        .role
        .as_ref()
        .map_or_else(|| default_instruction(&query.dataset_tag), |r| r.instruction.as_str());
    let mut s = String::new();
    s.push_str("### Instruction\n");
    s.push_str(instruction.trim());
    s.push_str("\n\n### Current state\n");
    if let Some(role) = &query.role {
        let _ = writeln!(s, "Role: {}", role.name);
    }
    let _ = writeln!(
        s,
        "Current time: {} (day {})",
        query.slotting.clock_label(query.current_slot),
        query.day_offset
    );
    s.push_str("POI distribution of the current region:\n");
    let pct = prompt_percentages(&query.current_semantics);
    for (c, p) in PoiCategory::ALL.iter().zip(pct) {
        let _ = writeln!(s, "- {}: {p}%", c.label());
    }
    let _ = write!(
        s,
        "\n### Task\nPredict the next arrival time as one of the {} daily slots of {} minutes, \
         and the POI distribution of the next destination.\n",
        query.slotting.slots_per_day(),
        query.slotting.slot_minutes()
    );
    s
}
