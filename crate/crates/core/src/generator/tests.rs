use mobiforge_autodiff::gradcheck::check_params;
use mobiforge_autodiff::{Graph, ParamStore, SeedStream, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::embedding::{EncoderConfig, SpatialModel};
use crate::geo::{aggregate_semantics, build_partition, CityMap, GeoPoint, PoiCategory, PoiRecord};
use crate::planner::{PlannerBackend, PlannerQuery, PlannerResponse};
use crate::trajectory::TimeSlotting;

fn tiny_dit() -> DiTConfig {
    DiTConfig {
        blocks: 2,
        heads: 2,
        d_model: 8,
        ffn: 12,
    }
}

fn random_dist(rng: &mut ChaCha8Rng) -> PoiDistribution {
    let raw: Vec<f64> = (0..NUM_POI_CATEGORIES).map(|_| rng.random::<f64>()).collect();
    PoiDistribution::normalized(&raw).unwrap()
}

fn random_condition(len: usize, spd: usize, rng: &mut ChaCha8Rng) -> Condition {
    let semantic: Vec<PoiDistribution> = (0..len).map(|_| random_dist(rng)).collect();
    let temporal = (0..len)
        .map(|_| {
            let raw: Vec<f64> = (0..spd).map(|_| rng.random::<f64>() + 0.01).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        })
        .collect();
    Condition {
        start: semantic[0],
        temporal,
        semantic,
        anchor: None,
    }
}

fn randomize(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
    }
}

#[test]
fn linear_schedule_endpoints_and_midpoint() {
    let s = build_schedule(1000, 0.001, 0.1).unwrap();
    assert_eq!(s.steps(), 1000);
    assert!((s.beta(1) - 0.001).abs() < 1e-15);
    assert!((s.beta(1000) - 0.1).abs() < 1e-15);
    assert!((s.beta(500) - (0.001 + 499.0 / 999.0 * 0.099)).abs() < 1e-15);
    assert!((s.beta(500) - 0.050_450_45).abs() < 1e-8);
    for t in 1..=1000 {
        assert!((s.alpha_bar(t) - s.alpha_bar(t - 1) * (1.0 - s.beta(t))).abs() < 1e-15);
        if t > 1 {
            assert!(s.beta(t) > s.beta(t - 1));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            let v = s.posterior(t).variance;
            assert!(v > 0.0 && v <= s.beta(t), "t={t}: {v}");
        }
        assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) < 1.0);
    }
}

#[test]
fn invalid_schedules_are_rejected() {
    for (n, a, b) in [(1, 0.001, 0.1), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0), (10, 0.1, 0.1)] {
        assert!(matches!(build_schedule(n, a, b), Err(GenError::Schedule(_))), "{n} {a} {b}");
    }
    let s = build_schedule(10, 0.01, 0.2).unwrap();
    assert!(s.respace(1).is_err());
    assert!(s.respace(11).is_err());
}

#[test]
fn respacing_keeps_signal_levels_of_kept_steps() {
    let base = build_schedule(1000, 0.001, 0.1).unwrap();
    let fast = ScheduleConfig {
        respace_to: Some(100),
        ..ScheduleConfig::default()
    }
    .build()
    .unwrap();
    assert_eq!(fast.steps(), 100);
    for i in 1..=100 {
        let (a, b) = (fast.alpha_bar(i), base.alpha_bar(10 * i));
        assert!(((a - b) / b).abs() < 1e-9, "step {i}: {a} vs {b}");
        assert!(fast.beta(i) > 0.0 && fast.beta(i) < 1.0);
    }
}

#[test]
fn posterior_at_first_step_returns_the_prediction() {
    let s = build_schedule(100, 0.001, 0.1).unwrap();
    let p = s.posterior(1);
    assert!((p.coef_x0 - 1.0).abs() < 1e-12);
    assert!(p.coef_xt.abs() < 1e-12);
    assert!(p.variance.abs() < 1e-15);
}

#[test]
fn forward_noise_endpoints() {
    let s = build_schedule(1000, 0.001, 0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x0 = Tensor::from_fn(vec![9, 16], |_| rng.sample::<f64, _>(StandardNormal));
    let eps = Tensor::from_fn(vec![9, 16], |_| rng.sample::<f64, _>(StandardNormal));
    let zero = Tensor::zeros(vec![9, 16]);
    let t = 300;
    let xt = s.forward_noise(&x0, t, &zero).unwrap();
    let ab = s.alpha_bar(t).sqrt();
    assert!(xt.data().iter().zip(x0.data()).all(|(a, b)| *a == ab * b));
    let x1 = s.forward_noise(&x0, 1, &eps).unwrap();
    let bound = (1.0 - s.alpha_bar(1)).sqrt() * eps.norm() + (1.0 - s.alpha_bar(1).sqrt()) * x0.norm();
    let diff: f64 = x1.data().iter().zip(x0.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!(diff <= bound + 1e-12);
    assert!(matches!(s.forward_noise(&x0, 0, &eps), Err(GenError::Schedule(_))));
    assert!(matches!(s.forward_noise(&x0, 1001, &eps), Err(GenError::Schedule(_))));
    assert!(matches!(s.forward_noise(&x0, 5, &Tensor::zeros(vec![9, 15])), Err(GenError::Shape(_))));
}

#[test]
fn forward_noise_second_moment_matches_formula() {
    let s = build_schedule(1000, 0.001, 0.1).unwrap();
    let d = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for t in [1, 50, 200, 1000] {
        let n = 10_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let x0 = Tensor::from_fn(vec![1, d], |_| rng.sample::<f64, _>(StandardNormal));
            let e = Tensor::from_fn(vec![1, d], |_| rng.sample::<f64, _>(StandardNormal));
            acc += s.forward_noise(&x0, t, &e).unwrap().norm().powi(2);
        }
        let ab = s.alpha_bar(t);
        let want = ab * d as f64 + (1.0 - ab) * d as f64;
        let got = acc / n as f64;
        assert!(((got - want) / want).abs() < 0.03, "t={t}: {got} vs {want}");
    }
}

/// Embedded pooled conditions as plain `[1, d]` inputs.
fn embedded(g: &mut Graph<'_, f64>, d: usize, seed: u64) -> [Var; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [0; 4].map(|_| g.input(Tensor::from_fn(vec![1, d], |_| rng.random_range(-1.0..1.0))))
}

#[test]
fn zero_initialized_modulation_is_all_zero() {
    let mut store = ParamStore::<f64>::new();
    let net = Dit::init(&mut store, tiny_dit(), 6, 4, &mut SeedStream::new(1)).unwrap();
    let mut g = Graph::with_params(&store);
    let [r, m, d, t] = embedded(&mut g, 8, 3);
    let md = net.modulation(&mut g, 0, r, m, d, t).unwrap();
    for v in [md.gamma1, md.beta1, md.alpha1, md.gamma2, md.beta2, md.alpha2] {
        assert!(g.value(v).data().iter().all(|&x| x == 0.0));
        assert_eq!(g.shape(v), &[1, 8]);
    }
}

#[test]
fn modulation_sums_its_inputs() {
    let mut store = ParamStore::<f64>::new();
    let net = Dit::init(&mut store, tiny_dit(), 6, 4, &mut SeedStream::new(1)).unwrap();
    randomize(&mut store, 2, 0.5);
    let mut g = Graph::with_params(&store);
    let [r, m, d, t] = embedded(&mut g, 8, 3);
    let [_, _, d2, _] = embedded(&mut g, 8, 4);
    let a = net.modulation(&mut g, 1, r, m, d, t).unwrap();
    let swapped = net.modulation(&mut g, 1, t, m, d, r).unwrap();
    let changed = net.modulation(&mut g, 1, r, m, d2, t).unwrap();
    // Same sum in a different order: equal up to rounding.
    assert!(g.value(a.gamma1).max_abs_diff(g.value(swapped.gamma1)) < 1e-12);
    assert!(g.value(a.alpha2).max_abs_diff(g.value(swapped.alpha2)) < 1e-12);
    assert_ne!(g.value(a.gamma1), g.value(changed.gamma1));
    assert_ne!(g.value(a.beta2), g.value(changed.beta2));
}

fn block_inputs(g: &mut Graph<'_, f64>, batch: usize, len: usize, d: usize, seed: u64) -> (Var, Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = g.input(Tensor::from_fn(vec![batch * len, d], |_| rng.random_range(-1.0..1.0)));
    let m = g.input(Tensor::from_fn(vec![batch * len, d], |_| rng.random_range(-1.0..1.0)));
    (x, m)
}

#[test]
fn gated_block_with_silent_cross_attention_is_identity() {
    let mut store = ParamStore::<f64>::new();
    let net = Dit::init(&mut store, tiny_dit(), 6, 4, &mut SeedStream::new(5)).unwrap();
    for p in store.iter_mut().filter(|p| p.name.contains("cross_attn")) {
        p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut g = Graph::with_params(&store);
    let (x, m) = block_inputs(&mut g, 2, 3, 8, 1);
    let [r, mp, d, t] = embedded(&mut g, 8, 2);
    let [r, mp, d, t] = [r, mp, d, t].map(|v| g.broadcast_rows(v, 2).unwrap());
    let md = net.modulation(&mut g, 0, r, mp, d, t).unwrap();
    let y = net.block(&mut g, 0, x, m, &md, 2, 3).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn block_preserves_shape_and_matches_finite_differences() {
    let mut store = ParamStore::<f64>::new();
    let net = Dit::init(&mut store, tiny_dit(), 6, 4, &mut SeedStream::new(5)).unwrap();
    randomize(&mut store, 9, 0.4);
    let probe = {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        Tensor::from_fn(vec![3, 8], |_| rng.random_range(-1.0..1.0))
    };
    let f = |g: &mut Graph<'_, f64>| -> mobiforge_autodiff::Result<Var> {
        let lift = |e: GenError| TensorError::InvalidArgument {
            op: "dit_block",
            msg: e.to_string(),
        };
        let (x, m) = block_inputs(g, 1, 3, 8, 1);
        let [r, mp, d, t] = embedded(g, 8, 2);
        let md = net.modulation(g, 0, r, mp, d, t).map_err(lift)?;
        let y = net.block(g, 0, x, m, &md, 1, 3).map_err(lift)?;
        assert_eq!(g.shape(y), &[3, 8]);
        let p = g.input(probe.clone());
        let yp = g.mul(y, p)?;
        g.sum(yp)
    };
    let report = check_params(&store, 1e-5, 30, f).unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn whole_denoiser_matches_finite_differences() {
    let mut store = ParamStore::<f64>::new();
    let net = Dit::init(&mut store, tiny_dit(), 6, 4, &mut SeedStream::new(2)).unwrap();
    randomize(&mut store, 3, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let conds = [random_condition(3, 4, &mut rng), random_condition(3, 4, &mut rng)];
    let refs: Vec<&Condition> = conds.iter().collect();
    let cond: ConditionBatch<f64> = {
        let c = condition_batch(&refs, 3, 4);
        ConditionBatch {
            start: c.start.cast(),
            temporal: c.temporal.cast(),
            semantic: c.semantic.cast(),
            batch: 2,
            len: 3,
        }
    };
    let x = Tensor::from_fn(vec![6, 6], |_| rng.random_range(-1.0..1.0));
    let target = Tensor::from_fn(vec![6, 6], |_| rng.random_range(-1.0..1.0));
    let report = check_params(&store, 1e-5, 12, |g| {
        let xv = g.input(x.clone());
        let y = net
            .forward(g, xv, &[3, 17], &cond)
            .map_err(|e| TensorError::InvalidArgument { op: "dit", msg: e.to_string() })?;
        let tv = g.input(target.clone());
        g.mse(y, tv)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

fn tiny_config() -> GeneratorConfig {
    GeneratorConfig {
        dit: tiny_dit(),
        schedule: ScheduleConfig {
            steps: 1000,
            respace_to: Some(50),
            ..ScheduleConfig::default()
        },
        latent_dim: 6,
        slots_per_day: 4,
    }
}

#[test]
fn untrained_generator_predicts_zero() {
    let g = Generator::new(tiny_config(), LatentNormalizer::identity(6), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c = random_condition(3, 4, &mut rng);
    let x = Tensor::from_fn(vec![3, 6], |_| rng.random_range(-3.0f32..3.0));
    let y = g.predict_x0(&x, &[10], &[&c]).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn denoiser_is_deterministic_batch_independent_and_stable() {
    let cfg = tiny_config();
    let (gen, _) = {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ex: Vec<GenExample> = (0..8)
            .map(|_| GenExample {
                latent: Tensor::from_fn(vec![4, 6], |_| rng.random_range(-1.0f32..1.0)),
                condition: random_condition(4, 4, &mut rng),
            })
            .collect();
        let train = GenTrainConfig {
            epochs: 5,
            batch_size: 4,
            ..GenTrainConfig::default()
        };
        train_generator(&ex, &cfg, &train, 1).unwrap()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (c1, c2) = (random_condition(4, 4, &mut rng), random_condition(4, 4, &mut rng));
    let x = Tensor::from_fn(vec![8, 6], |_| rng.random_range(-1.0f32..1.0));
    let a = gen.predict_x0(&x, &[5, 40], &[&c1, &c2]).unwrap();
    let b = gen.predict_x0(&x, &[5, 40], &[&c1, &c2]).unwrap();
    assert_eq!(a, b);
    assert!(a.data().iter().any(|&v| v != 0.0));
    // Swap the two samples.
    let xs = Tensor::from_fn(vec![8, 6], |i| x.data()[(i + 24) % 48]);
    let s = gen.predict_x0(&xs, &[40, 5], &[&c2, &c1]).unwrap();
    for i in 0..48 {
        assert!((s.data()[i] - a.data()[(i + 24) % 48]).abs() < 1e-6);
    }
    let huge = Tensor::from_fn(vec![4, 6], |i| if i == 0 { 1000.0f32 } else { 0.0 });
    assert!(gen.predict_x0(&huge, &[1], &[&c1]).unwrap().is_finite());
}

#[test]
fn memorizes_a_single_latent_and_samples_it_back() {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x0 = Tensor::from_fn(vec![3, 6], |_| rng.random_range(-2.0f32..2.0));
    let cond = random_condition(3, 4, &mut rng);
    let ex = vec![
        GenExample {
            latent: x0.clone(),
            condition: cond.clone(),
        };
        16
    ];
    let train = GenTrainConfig {
        epochs: 2000,
        max_steps: Some(2000),
        batch_size: 16,
        lr: 3e-3,
        grad_clip: Some(1.0),
    };
    let (gen, report) = train_generator(&ex, &cfg, &train, 2).unwrap();
    assert_eq!(report.step_losses.len(), 2000);
    let tail = &report.step_losses[1900..];
    let tail_mean = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!(tail_mean < 1e-3, "loss {tail_mean}");

    let out = gen.sample(&[cond.clone(), cond], &[1, 2]).unwrap();
    for z in &out {
        let dist: f32 = z.latents.data().iter().zip(x0.data()).map(|(a, b)| (a - b).powi(2)).sum::<f32>().sqrt();
        assert!(dist < 0.1 * x0.norm(), "distance {dist} vs norm {}", x0.norm());
    }
}

#[test]
fn different_seeds_give_different_samples() {
    let mut gen = Generator::new(tiny_config(), LatentNormalizer::identity(6), 1).unwrap();
    // An untrained head predicts x̂0 = 0, which the last step returns for every seed.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for p in gen.store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
    }
    let c = random_condition(3, 4, &mut ChaCha8Rng::seed_from_u64(0));
    let out = gen.sample(&[c.clone(), c.clone(), c], &[1, 2, 1]).unwrap();
    assert_ne!(out[0].latents, out[1].latents);
    assert_eq!(out[0].latents, out[2].latents);
    assert_eq!(out[0].source_city, SYNTHETIC_SOURCE);
}

#[test]
fn anchored_samples_keep_their_first_step() {
    let mut gen = Generator::new(tiny_config(), LatentNormalizer::identity(6), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for p in gen.store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
    }
    gen.normalizer = LatentNormalizer {
        mean: vec![0.5; 6],
        std: vec![2.0; 6],
    };
    let anchor = vec![0.25f32, -1.0, 3.0, 0.0, 1.5, -2.5];
    let c = random_condition(3, 4, &mut ChaCha8Rng::seed_from_u64(0));
    let out = gen.sample(&[c.clone().with_anchor(anchor.clone()), c.clone()], &[1, 1]).unwrap();
    let row: Vec<f32> = out[0].latents.row(0).to_vec();
    assert!(row.iter().zip(&anchor).all(|(a, b)| (a - b).abs() < 1e-5), "{row:?}");
    assert_ne!(out[0].latents.row(1), out[1].latents.row(1));
    assert!(gen.sample(&[c.with_anchor(vec![0.0; 5])], &[1]).is_err());
}

#[test]
fn unpaired_examples_and_empty_sets_are_errors() {
    let cfg = tiny_config();
    let c = random_condition(3, 4, &mut ChaCha8Rng::seed_from_u64(0));
    let bad = GenExample {
        latent: Tensor::zeros(vec![4, 6]),
        condition: c,
    };
    assert!(matches!(
        train_generator(&[bad], &cfg, &GenTrainConfig::default(), 0),
        Err(GenError::Unpaired { index: 0, latent: 4, plan: 3 })
    ));
    assert!(matches!(train_generator(&[], &cfg, &GenTrainConfig::default(), 0), Err(GenError::EmptyDataset)));
}

#[test]
fn normalizer_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let zs: Vec<Tensor<f32>> = (0..10).map(|_| Tensor::from_fn(vec![5, 4], |_| rng.random_range(-3.0f32..7.0))).collect();
    let n = LatentNormalizer::fit(&zs.iter().collect::<Vec<_>>()).unwrap();
    let normed: Vec<Tensor<f32>> = zs.iter().map(|z| n.normalize(z)).collect();
    let refit = LatentNormalizer::fit(&normed.iter().collect::<Vec<_>>()).unwrap();
    assert!(refit.mean.iter().all(|m| m.abs() < 1e-5));
    assert!(refit.std.iter().all(|s| (s - 1.0).abs() < 1e-4));
    assert!(zs[0].max_abs_diff(&n.denormalize(&normed[0])) < 1e-5);
}

#[test]
fn condition_fitting_pads_and_truncates() {
    let c = random_condition(3, 4, &mut ChaCha8Rng::seed_from_u64(1));
    let long = c.fit(5);
    assert_eq!(long.len(), 5);
    assert_eq!(long.temporal[4], c.temporal[2]);
    assert_eq!(long.semantic[3], c.semantic[2]);
    assert_eq!(c.fit(2).semantic, c.semantic[..2].to_vec());
    let u = Condition::uniform(c.start, 4, 4);
    assert!(u.temporal.iter().all(|r| r.iter().all(|&v| v == 0.25)));
}

#[test]
fn save_and_load_round_trip() {
    let gen = Generator::new(tiny_config(), LatentNormalizer::identity(6), 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("gen");
    gen.save(&stem).unwrap();
    let back = Generator::load(&stem).unwrap();
    assert_eq!(back.config(), gen.config());
    let c = random_condition(3, 4, &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(gen.sample(&[c.clone()], &[9]).unwrap(), back.sample(&[c], &[9]).unwrap());
}

/// Moves two slots ahead and prefers a seeded category.
struct Hop;

impl PlannerBackend for Hop {
    fn id(&self) -> String {
        "hop".into()
    }
    fn slots_per_day(&self) -> usize {
        8
    }
    fn infer(&self, q: &PlannerQuery) -> Result<PlannerResponse, crate::planner::PlannerError> {
        let mut time_logits = vec![0.0; 8];
        time_logits[(q.current_slot + 2) % 8] = 5.0;
        let mut poi_logits = vec![0.0; NUM_POI_CATEGORIES];
        poi_logits[q.current_slot % NUM_POI_CATEGORIES] = 3.0;
        Ok(PlannerResponse { time_logits, poi_logits })
    }
}

fn toy_city() -> CityMap {
    let seeds: Vec<GeoPoint> = (0..12).map(|i| GeoPoint::new(113.0 + 0.01 * (i % 4) as f64, 23.0 + 0.01 * (i / 4) as f64)).collect();
    let mut map = build_partition("toy", &seeds).unwrap();
    let pois: Vec<PoiRecord> = (0..12)
        .map(|i| PoiRecord {
            lon: seeds[i].lon,
            lat: seeds[i].lat,
            category: PoiCategory::from_index(i % NUM_POI_CATEGORIES).unwrap(),
        })
        .collect();
    map = aggregate_semantics(&pois, &map);
    map
}

#[test]
fn generated_trajectories_are_well_formed() {
    let map = toy_city();
    let slotting = TimeSlotting::new(180).unwrap();
    let enc = EncoderConfig {
        hidden: 4,
        out_dim: 6,
        decoder_hidden: 8,
        ..EncoderConfig::default()
    };
    let mut embedding = SpatialModel::new(enc.clone(), 1).unwrap();
    embedding
        .insert_decoder(crate::embedding::CityDecoder::new("toy", map.num_regions(), &enc, 2).unwrap())
        .unwrap();
    let config = GeneratorConfig {
        slots_per_day: 8,
        schedule: ScheduleConfig {
            respace_to: Some(10),
            ..ScheduleConfig::default()
        },
        ..tiny_config()
    };
    let generator = Generator::new(config, LatentNormalizer::identity(6), 3).unwrap();
    let models = Models {
        planner: &Hop,
        embedding: &embedding,
        generator: &generator,
        slotting,
        k: 4,
        plan_source: PlanSource::Planner,
        dataset_tag: "generic",
        jobs: 2,
        anchor_start: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let reqs: Vec<GenerationRequest> = (0..1000)
        .map(|i| GenerationRequest {
            agent_id: format!("g{i}"),
            start_region: rng.random_range(0..12),
            start_time: 1_704_067_200 + rng.random_range(0..86_400 * 3),
            role: None,
        })
        .collect();
    let out = generate_batch(&reqs, &map, &models, 77).unwrap();
    assert_eq!(out.len(), 1000);
    for (t, r) in out.iter().zip(&reqs) {
        assert_eq!(t.len(), 5);
        assert_eq!((t.stays[0].region_id, t.stays[0].timestamp), (r.start_region, r.start_time));
        assert!(t.stays.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
        t.validate(Some(&map)).unwrap();
    }
    let single = generate_trajectory(&reqs[5], &map, &models, 77 ^ 5).unwrap();
    assert_eq!(single, out[5]);
    let again = generate_batch(&reqs[..20], &map, &models, 77).unwrap();
    assert_eq!(again[..], out[..20]);
    let missing = CityMap {
        city_id: "elsewhere".into(),
        ..map.clone()
    };
    assert!(matches!(
        generate_trajectory(&reqs[0], &missing, &models, 1),
        Err(GenerateError::Decoding(_))
    ));
}
