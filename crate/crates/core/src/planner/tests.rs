use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mock::{MockPlannerServer, MockReply};
use super::*;
use crate::geo::{build_partition, GeoPoint, PoiCategory};

const SPD: usize = 48;

/// Always predicts `current + step` (mod day) and uniform POIs.
struct Stride {
    step: usize,
    calls: AtomicUsize,
}

impl Stride {
    fn new(step: usize) -> Self {
        Self {
            step,
            calls: AtomicUsize::new(0),
        }
    }
}

impl PlannerBackend for Stride {
    fn id(&self) -> String {
        "stride".into()
    }
    fn slots_per_day(&self) -> usize {
        SPD
    }
    fn infer(&self, q: &PlannerQuery) -> Result<PlannerResponse, PlannerError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let mut time_logits = vec![0.0; SPD];
        time_logits[(q.current_slot + self.step) % SPD] = 20.0;
        Ok(PlannerResponse {
            time_logits,
            poi_logits: vec![0.0; 14],
        })
    }
}

/// Random logits, including adversarial ones that never advance the clock.
struct Chaos(Mutex<ChaCha8Rng>);

impl PlannerBackend for Chaos {
    fn id(&self) -> String {
        "chaos".into()
    }
    fn slots_per_day(&self) -> usize {
        SPD
    }
    fn infer(&self, q: &PlannerQuery) -> Result<PlannerResponse, PlannerError> {
        let mut rng = self.0.lock().unwrap();
        let mut time_logits: Vec<f64> = (0..SPD).map(|_| rng.random_range(-3.0..3.0)).collect();
        match rng.random_range(0..3) {
            0 => time_logits[q.current_slot] = 50.0,
            1 => time_logits[rng.random_range(0..=q.current_slot)] = 50.0,
            _ => {}
        }
        Ok(PlannerResponse {
            time_logits,
            poi_logits: (0..14).map(|_| rng.random_range(-5.0..5.0)).collect(),
        })
    }
}

struct Failing;

impl PlannerBackend for Failing {
    fn id(&self) -> String {
        "failing".into()
    }
    fn slots_per_day(&self) -> usize {
        SPD
    }
    fn infer(&self, q: &PlannerQuery) -> Result<PlannerResponse, PlannerError> {
        if q.current_slot > 20 {
            Err(PlannerError::Transport("down".into()))
        } else {
            Stride::new(5).infer(q)
        }
    }
}

fn city() -> CityMap {
    build_partition("c", &[GeoPoint::new(0.0, 0.0), GeoPoint::new(0.0, 0.5)]).unwrap()
}

fn argmaxes(p: &TravelPlan) -> Vec<usize> {
    p.temporal.iter().map(|t| mobiforge_autodiff::argmax(t)).collect()
}

#[test]
fn stride_backend_plans_three_steps() {
    let b = Stride::new(2);
    let p = plan(10, 0, &city(), 3, TimeSlotting::default(), &b, &PlanOptions::default()).unwrap();
    assert_eq!(p.steps, 3);
    assert_eq!(argmaxes(&p), vec![12, 14, 16]);
    assert_eq!(p.arrival_slots, vec![12, 14, 16]);
    assert_eq!(p.semantic.len(), 3);
    assert!(p.warnings.is_empty());
    assert_eq!(b.calls.load(Ordering::SeqCst), 3);
}

#[test]
fn clock_horizon_stops_at_the_time_limit() {
    let opts = PlanOptions {
        horizon: Horizon::Clock,
        ..PlanOptions::default()
    };
    let p = plan(10, 0, &city(), 3, TimeSlotting::default(), &Stride::new(2), &opts).unwrap();
    assert_eq!(p.arrival_slots, vec![12, 14]);
}

#[test]
fn single_step_plan_calls_once() {
    let b = Stride::new(2);
    let p = plan(0, 1, &city(), 1, TimeSlotting::default(), &b, &PlanOptions::default()).unwrap();
    assert_eq!(p.steps, 1);
    assert_eq!(b.calls.load(Ordering::SeqCst), 1);
    assert!(matches!(
        plan(0, 1, &city(), 0, TimeSlotting::default(), &b, &PlanOptions::default()),
        Err(PlannerError::ZeroSteps)
    ));
}

#[test]
fn stalled_clock_is_forced_forward() {
    let p = plan(30, 0, &city(), 4, TimeSlotting::default(), &Stride::new(0), &PlanOptions::default()).unwrap();
    assert_eq!(p.arrival_slots, vec![31, 32, 33, 34]);
    assert_eq!(p.warnings.len(), 4);
    assert_eq!(p.warnings[0].step, 0);
}

#[test]
fn earlier_slot_wraps_to_next_day() {
    let p = plan(40, 0, &city(), 3, TimeSlotting::default(), &Stride::new(5), &PlanOptions::default()).unwrap();
    assert_eq!(p.arrival_slots, vec![45, 50, 55]);
    assert_eq!(argmaxes(&p), vec![45, 2, 7]);
}

#[test]
fn backend_failure_names_the_step() {
    match plan(10, 0, &city(), 5, TimeSlotting::default(), &Failing, &PlanOptions::default()) {
        Err(PlannerError::Step { step, .. }) => assert_eq!(step, 3),
        other => panic!("expected step error, got {other:?}"),
    }
    assert!(matches!(
        plan(10, 9, &city(), 5, TimeSlotting::default(), &Failing, &PlanOptions::default()),
        Err(PlannerError::Geo(_))
    ));
}

#[test]
fn chaotic_backends_always_terminate_monotonically() {
    let b = Chaos(Mutex::new(ChaCha8Rng::seed_from_u64(3)));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let k = rng.random_range(1..12);
        let start = rng.random_range(0..SPD);
        let p = plan(start, 0, &city(), k, TimeSlotting::default(), &b, &PlanOptions::default()).unwrap();
        assert!(p.steps <= k && p.steps == p.temporal.len() && p.steps == p.semantic.len());
        assert!(p.arrival_slots[0] > start as u64);
        assert!(p.arrival_slots.windows(2).all(|w| w[0] < w[1]));
        for t in &p.temporal {
            assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

fn simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0f64).powi(3)).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

fn kl_oracle(p: &[f64], logits: &[f64]) -> f64 {
    let q = softmax(logits);
    p.iter()
        .zip(&q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}

#[test]
fn loss_vanishes_for_saturated_matches() {
    let mut time_logits = vec![-40.0; SPD];
    time_logits[7] = 40.0;
    let mut poi_logits = vec![-40.0; 14];
    poi_logits[3] = 40.0;
    let target = PlannerTarget::new(7, SPD, PoiDistribution::one_hot(PoiCategory::Automotive), 0.0);
    let l = planner_loss(&PlannerResponse { time_logits, poi_logits }, &target, PlannerLossConfig::default()).unwrap();
    assert!(l < 1e-4 && l >= 0.0, "loss {l}");
}

#[test]
fn loss_matches_summation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let resp = PlannerResponse {
            time_logits: (0..SPD).map(|_| rng.random_range(-4.0..4.0)).collect(),
            poi_logits: (0..14).map(|_| rng.random_range(-4.0..4.0)).collect(),
        };
        let y_poi = PoiDistribution::normalized(&simplex(&mut rng, 14)).unwrap();
        let target = PlannerTarget {
            y_time: simplex(&mut rng, SPD),
            y_poi,
        };
        let lambda = rng.random_range(0.0..3.0);
        let got = planner_loss(&resp, &target, PlannerLossConfig::new(lambda).unwrap()).unwrap();
        let want = kl_oracle(y_poi.weights(), &resp.poi_logits) + lambda * kl_oracle(&target.y_time, &resp.time_logits);
        assert!((got - want).abs() < 1e-5, "{got} vs {want}");

        let poi_only = planner_loss(&resp, &target, PlannerLossConfig::new(0.0).unwrap()).unwrap();
        assert!((poi_only - kl_oracle(y_poi.weights(), &resp.poi_logits)).abs() < 1e-12);

        let shifted = PlannerResponse {
            time_logits: resp.time_logits.iter().map(|x| x + 17.0).collect(),
            poi_logits: resp.poi_logits.iter().map(|x| x - 5.0).collect(),
        };
        let again = planner_loss(&shifted, &target, PlannerLossConfig::new(lambda).unwrap()).unwrap();
        assert!((again - got).abs() < 1e-6);
    }
}

#[test]
fn loss_rejects_bad_inputs() {
    let resp = PlannerResponse {
        time_logits: vec![0.0; SPD],
        poi_logits: vec![0.0; 14],
    };
    let bad = PlannerTarget {
        y_time: vec![0.5; SPD],
        y_poi: PoiDistribution::uniform(),
    };
    assert!(matches!(
        planner_loss(&resp, &bad, PlannerLossConfig::default()),
        Err(PlannerError::InvalidTarget(_))
    ));
    assert!(PlannerLossConfig::new(-1.0).is_err());
    let short = PlannerResponse {
        time_logits: vec![0.0; SPD],
        poi_logits: vec![0.0; 13],
    };
    let ok = PlannerTarget::new(0, SPD, PoiDistribution::uniform(), 0.05);
    assert!((ok.y_time.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(matches!(
        planner_loss(&short, &ok, PlannerLossConfig::default()),
        Err(PlannerError::Shape { expected: 14, .. })
    ));
}

fn example(slot: usize, next: usize, role: Option<&str>) -> PlannerExample {
    PlannerExample {
        slot,
        semantics: PoiDistribution::one_hot(PoiCategory::CommercialResidential),
        role: role.map(str::to_string),
        next_slot: next,
        next_semantics: PoiDistribution::one_hot(PoiCategory::CompaniesEnterprises),
    }
}

#[test]
fn untrained_backend_is_near_uniform_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let examples: Vec<PlannerExample> = (0..200)
        .map(|_| {
            let s = rng.random_range(0..40);
            let mut e = example(s, s + rng.random_range(1..8), None);
            e.next_semantics = PoiDistribution::normalized(&simplex(&mut rng, 14)).unwrap();
            e
        })
        .collect();
    let cfg = PlannerTrainConfig {
        epochs: 0,
        ..PlannerTrainConfig::default()
    };
    let (model, report) = train_neural_backend(&examples, TimeSlotting::default(), &cfg, 1).unwrap();
    assert!(report.step_losses.is_empty());
    let untrained = model.evaluate(&examples, &cfg).unwrap();
    // Zero logits are the uniform predictor.
    let uniform: f64 = examples
        .iter()
        .map(|e| {
            let t = PlannerTarget::new(e.next_slot, SPD, e.next_semantics, 0.0);
            let r = PlannerResponse {
                time_logits: vec![0.0; SPD],
                poi_logits: vec![0.0; 14],
            };
            planner_loss(&r, &t, PlannerLossConfig::default()).unwrap()
        })
        .sum::<f64>()
        / examples.len() as f64;
    assert!(uniform <= (48f64).ln() + (14f64).ln() + 1e-9);
    assert!((untrained - uniform).abs() / uniform < 0.15, "{untrained} vs {uniform}");
}

#[test]
fn single_example_loss_falls_every_epoch() {
    let examples = vec![example(16, 18, Some("office worker"))];
    let cfg = PlannerTrainConfig {
        epochs: 10,
        ..PlannerTrainConfig::default()
    };
    let (_, report) = train_neural_backend(&examples, TimeSlotting::default(), &cfg, 7).unwrap();
    assert_eq!(report.epoch_losses.len(), 10);
    assert!(report.epoch_losses.windows(2).all(|w| w[1] < w[0]), "{:?}", report.epoch_losses);
}

#[test]
fn planted_stride_is_learned() {
    let examples: Vec<PlannerExample> = (0..400).map(|i| {
        let s = 10 + i % 20;
        example(s, s + 2, None)
    }).collect();
    let cfg = PlannerTrainConfig {
        epochs: 40,
        lr: 3e-3,
        ..PlannerTrainConfig::default()
    };
    let (model, _) = train_neural_backend(&examples, TimeSlotting::default(), &cfg, 3).unwrap();
    for s in 10..30 {
        let q = PlannerQuery {
            current_slot: s,
            day_offset: 0,
            current_semantics: PoiDistribution::one_hot(PoiCategory::CommercialResidential),
            role: None,
            dataset_tag: "synthetic".into(),
            slotting: TimeSlotting::default(),
        };
        let r = model.infer(&q).unwrap();
        assert_eq!(mobiforge_autodiff::argmax(&r.time_logits), s + 2, "slot {s}");
        assert_eq!(mobiforge_autodiff::argmax(&r.poi_logits), PoiCategory::CompaniesEnterprises.index());
    }
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let examples: Vec<PlannerExample> = (0..50).map(|i| example(i % 40, i % 40 + 3, Some("retiree"))).collect();
    let cfg = PlannerTrainConfig {
        epochs: 2,
        ..PlannerTrainConfig::default()
    };
    let (a, ra) = train_neural_backend(&examples, TimeSlotting::default(), &cfg, 5).unwrap();
    let (_, rb) = train_neural_backend(&examples, TimeSlotting::default(), &cfg, 5).unwrap();
    assert_eq!(ra, rb);
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("planner");
    a.save(&stem).unwrap();
    let b = NeuralPlanner::load(&stem).unwrap();
    let rows = [(3, PoiDistribution::uniform(), Some("retiree")), (9, PoiDistribution::uniform(), None)];
    assert_eq!(a.predict(&rows).unwrap(), b.predict(&rows).unwrap());
    assert_eq!(a.config(), b.config());
    assert!(matches!(
        train_neural_backend(&[], TimeSlotting::default(), &cfg, 5),
        Err(PlannerError::EmptyDataset)
    ));
}

fn office_query() -> PlannerQuery {
    let mut w = [0.0; 14];
    w[PoiCategory::CommercialResidential.index()] = 0.555;
    w[PoiCategory::DiningCuisine.index()] = 0.2;
    w[PoiCategory::ShoppingConsumerGoods.index()] = 0.145;
    w[PoiCategory::TransportationFacilities.index()] = 0.1;
    PlannerQuery {
        current_slot: 17,
        day_offset: 0,
        current_semantics: PoiDistribution::new(w).unwrap(),
        role: Some(RoleProfile::new("office worker", "You plan the day of an office worker.").unwrap()),
        dataset_tag: "private_car".into(),
        slotting: TimeSlotting::default(),
    }
}

#[test]
fn prompt_matches_golden_file() {
    let golden = include_str!("../../tests/golden/prompt_office_worker.txt");
    assert_eq!(render_prompt(&office_query()), golden);
    assert_eq!(render_prompt(&office_query()), render_prompt(&office_query()));
}

#[test]
fn prompt_includes_role_instruction_or_dataset_default() {
    let q = office_query();
    let text = render_prompt(&q);
    assert!(text.contains("You plan the day of an office worker."));
    assert!(text.contains("Current time: 08:30"));
    let plain = PlannerQuery { role: None, ..q };
    assert!(render_prompt(&plain).contains(default_instruction("private_car")));
}

proptest! {
    #[test]
    fn prompt_percentages_sum_to_100(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = PoiDistribution::normalized(&simplex(&mut rng, 14)).unwrap();
        let q = PlannerQuery { current_semantics: d, ..office_query() };
        let total: u32 = render_prompt(&q)
            .lines()
            .filter(|l| l.starts_with("- ") && l.ends_with('%'))
            .map(|l| l.rsplit(": ").next().unwrap().trim_end_matches('%').parse::<u32>().unwrap())
            .sum();
        prop_assert_eq!(total, 100);
        let pct = prompt_percentages(&d);
        for (p, w) in pct.iter().zip(d.weights()) {
            prop_assert!((f64::from(*p) - w * 100.0).abs() < 1.0);
        }
    }
}

fn remote(url: &str, attempts: usize) -> RemotePlanner {
    RemotePlanner::new(
        RemoteConfig {
            url: url.into(),
            timeout_ms: 2_000,
            max_attempts: attempts,
            backoff_ms: 1,
            max_in_flight: 2,
        },
        SPD,
    )
    .unwrap()
}

fn fixture() -> PlannerResponse {
    PlannerResponse {
        time_logits: (0..SPD).map(|i| i as f64 * 0.25).collect(),
        poi_logits: (0..14).map(|i| -(i as f64)).collect(),
    }
}

#[test]
fn remote_returns_fixed_fixture() {
    let server = MockPlannerServer::start(vec![], MockReply::Fixed(fixture())).unwrap();
    let r = remote(server.url(), 1).infer(&office_query()).unwrap();
    assert_eq!(r, fixture());
    let seen = server.requests();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].current_time, "08:30");
    assert_eq!(seen[0].role.as_deref(), Some("office worker"));
    assert_eq!(seen[0].instruction, render_prompt(&office_query()));
    assert_eq!(seen[0].poi_distribution.len(), 14);
}

#[test]
fn remote_rejects_wrong_lengths() {
    let mut short = fixture();
    short.poi_logits.pop();
    let server = MockPlannerServer::start(vec![], MockReply::Fixed(short)).unwrap();
    let err = remote(server.url(), 3).infer(&office_query()).unwrap_err();
    assert!(matches!(err, PlannerError::Shape { field: "poi_logits", expected: 14, got: 13 }));
    assert!(err.to_string().contains("expected 14"));
    assert_eq!(server.requests().len(), 1, "shape errors are not retried");
}

#[test]
fn remote_retries_transient_failures() {
    let script = vec![MockReply::Status(500), MockReply::Status(503)];
    let server = MockPlannerServer::start(script, MockReply::Fixed(fixture())).unwrap();
    let r = remote(server.url(), 3).infer(&office_query()).unwrap();
    assert_eq!(r, fixture());
    assert_eq!(server.requests().len(), 3);

    let script = vec![MockReply::Status(500), MockReply::Status(500)];
    let server = MockPlannerServer::start(script, MockReply::Fixed(fixture())).unwrap();
    match remote(server.url(), 2).infer(&office_query()) {
        Err(PlannerError::Exhausted { attempts: 2, .. }) => {}
        other => panic!("expected exhaustion, got {other:?}"),
    }
}

#[test]
fn remote_reports_malformed_json_and_timeouts() {
    let server = MockPlannerServer::start(vec![], MockReply::Raw("{\"time_logits\": [1,".into())).unwrap();
    assert!(matches!(
        remote(server.url(), 2).infer(&office_query()),
        Err(PlannerError::Malformed(_))
    ));

    let slow = MockReply::Delay(Duration::from_millis(400), Box::new(MockReply::Fixed(fixture())));
    let server = MockPlannerServer::start(vec![], slow).unwrap();
    let mut cfg = remote(server.url(), 1).config().clone();
    cfg.timeout_ms = 100;
    let client = RemotePlanner::new(cfg, SPD).unwrap();
    match client.infer(&office_query()) {
        Err(PlannerError::Exhausted { last, .. }) => assert!(matches!(*last, PlannerError::Timeout(100))),
        other => panic!("expected timeout, got {other:?}"),
    }
}

#[test]
fn remote_falls_back_when_configured() {
    let server = MockPlannerServer::start(vec![], MockReply::Status(500)).unwrap();
    let client = remote(server.url(), 1).with_fallback(Arc::new(Stride::new(3)));
    let r = client.infer(&office_query()).unwrap();
    assert_eq!(mobiforge_autodiff::argmax(&r.time_logits), 20);
    assert!(client.id().contains("fallback:stride"));
}

#[test]
fn echo_server_drives_a_full_plan() {
    let echo = MockReply::Echo {
        slots_per_day: SPD,
        advance: 2,
    };
    let server = MockPlannerServer::start(vec![], echo).unwrap();
    let client = remote(server.url(), 1);
    let p = plan(10, 0, &city(), 3, TimeSlotting::default(), &client, &PlanOptions::default()).unwrap();
    assert_eq!(p.arrival_slots, vec![12, 14, 16]);
    let reqs = server.requests();
    assert_eq!(reqs.iter().map(|r| r.current_time.as_str()).collect::<Vec<_>>(), vec!["05:00", "06:00", "07:00"]);
}
