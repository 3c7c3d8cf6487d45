//! The neural planner recovers the transitions planted in a synthetic city.

use std::collections::BTreeMap;

use mobiforge_core::geo::PoiCategory;
use mobiforge_core::planner::{planner_examples, train_neural_backend, PlannerTrainConfig};
use mobiforge_core::trajectory::{split_dataset, synth_city, SynthConfig};

fn signature(role: &str) -> PoiCategory {
    match role {
        "office worker" => PoiCategory::CompaniesEnterprises,
        "teacher" => PoiCategory::ScienceEducationCulture,
        "visitor" => PoiCategory::TouristAttractions,
        "retiree" => PoiCategory::LifeServices,
        other => panic!("unexpected role {other}"),
    }
}

#[test]
fn planted_rules_and_role_shifts_are_learned() {
    let mut cfg = SynthConfig::new("plant", 60, 1500, 21);
    cfg.deviation = 0.1;
    let city = synth_city(&cfg).unwrap();
    let slotting = cfg.slotting().unwrap();
    let split = split_dataset(&city.trajectories, 4).unwrap();
    let maps = BTreeMap::from([(city.map.city_id.clone(), city.map.clone())]);
    let examples = planner_examples(&split.train, &maps, &city.roles, slotting).unwrap();
    let train_cfg = PlannerTrainConfig {
        epochs: 12,
        ..PlannerTrainConfig::default()
    };
    let (model, report) = train_neural_backend(&examples, slotting, &train_cfg, 9).unwrap();
    assert!(report.epoch_losses.last() < report.epoch_losses.first());

    let index: BTreeMap<&str, usize> = city
        .trajectories
        .iter()
        .enumerate()
        .map(|(i, t)| (t.agent_id.as_str(), i))
        .collect();
    let (mut total, mut time_ok, mut poi_ok) = (0, 0, 0);
    // role -> (mass with role, mass without role, count) on the role's signature category
    let mut shift: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    for t in split.test.iter().chain(&split.val) {
        let ti = index[t.agent_id.as_str()];
        let plan = &city.plans[ti];
        let role = city.roles[&t.agent_id].as_str();
        for i in 0..t.len() - 1 {
            if plan.deviated[i] || plan.deviated[i + 1] {
                continue;
            }
            let (category, slot) = city.planned_next(ti, i).unwrap();
            let sem = *city.map.semantics_of(t.stays[i].region_id).unwrap();
            let mut r = model.predict(&[(plan.slots[i], sem, Some(role)), (plan.slots[i], sem, None)]).unwrap();
            let anonymous = r.pop().unwrap();
            let r = r.pop().unwrap();
            total += 1;
            time_ok += usize::from(mobiforge_autodiff::argmax(&r.time_logits) == slot);
            poi_ok += usize::from(mobiforge_autodiff::argmax(&r.poi_logits) == category.index());
            if category == signature(role) {
                let c = category.index();
                let e = shift.entry(role.to_string()).or_default();
                e.0 += mobiforge_core::planner::softmax(&r.poi_logits)[c];
                e.1 += mobiforge_core::planner::softmax(&anonymous.poi_logits)[c];
                e.2 += 1;
            }
        }
    }
    let (ta, pa) = (time_ok as f64 / total as f64, poi_ok as f64 / total as f64);
    assert!(ta >= 0.95 && pa >= 0.95, "time {ta:.3}, poi {pa:.3} over {total} queries");
    assert_eq!(shift.len(), 4);
    for (role, (with, without, n)) in shift {
        let (with, without) = (with / n as f64, without / n as f64);
        assert!(with >= 2.0 / 14.0, "{role}: {with:.3}");
        assert!(with > without, "{role}: role-free prediction {without:.3} >= {with:.3}");
    }
}
