use std::collections::BTreeMap;

use mobiforge_autodiff::gradcheck::check_params;
use mobiforge_autodiff::{Graph, ParamStore, SeedStream, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::trajectory::{synth_city, SynthConfig};

fn random_seq(n: usize, rng: &mut ChaCha8Rng) -> Vec<PoiDistribution> {
    (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..NUM_POI_CATEGORIES).map(|_| rng.random::<f64>()).collect();
            PoiDistribution::normalized(&raw).unwrap()
        })
        .collect()
}

fn small_config() -> EncoderConfig {
    EncoderConfig {
        layers: 3,
        hidden: 4,
        kernel: 3,
        dilations: vec![1, 2, 1],
        out_dim: 5,
        decoder_hidden: 6,
    }
}

#[test]
fn config_validation() {
    assert!(EncoderConfig::default().validate().is_ok());
    let even = EncoderConfig {
        kernel: 2,
        ..EncoderConfig::default()
    };
    assert!(matches!(even.validate(), Err(EmbedError::Config(_))));
    let short = EncoderConfig {
        dilations: vec![1, 2],
        ..EncoderConfig::default()
    };
    assert!(short.validate().is_err());
    assert_eq!(EncoderConfig::default().receptive_field(), 7);
}

#[test]
fn residual_path_alone_gives_projected_input() {
    let cfg = EncoderConfig::default();
    let mut store = ParamStore::<f64>::new();
    let enc = Encoder::init(&mut store, &cfg, &mut SeedStream::new(3)).unwrap();
    let keep = |name: &str| name.contains("residual") || name.starts_with("encoder/proj");
    for p in store.iter_mut().filter(|p| !keep(&p.name)) {
        p.value.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let seq = random_seq(9, &mut ChaCha8Rng::seed_from_u64(1));
    let x: Tensor<f64> = semantics_tensor(&[&seq]);

    let mut g = Graph::with_params(&store);
    let xv = g.input(x.clone());
    let out = enc.forward(&mut g, xv, 9).unwrap();
    let got = g.value(out).clone();

    // x · R then the output projection, computed by hand.
    let r = store.value(store.id("encoder/layer0/residual.weight").unwrap());
    let w = store.value(store.id("encoder/proj.weight").unwrap());
    let b = store.value(store.id("encoder/proj.bias").unwrap());
    let (h, d) = (cfg.hidden, cfg.out_dim);
    for t in 0..9 {
        let xr: Vec<f64> = (0..h)
            .map(|j| (0..NUM_POI_CATEGORIES).map(|i| x.row(t)[i] * r.data()[i * h + j]).sum())
            .collect();
        for k in 0..d {
            let want: f64 = b.data()[k] + (0..h).map(|j| xr[j] * w.data()[j * d + k]).sum::<f64>();
            assert!((got.row(t)[k] - want).abs() < 1e-12, "step {t} channel {k}");
        }
    }
}

#[test]
fn constant_input_gives_constant_output_past_the_receptive_field() {
    let mut raw = [0.0; NUM_POI_CATEGORIES];
    raw[..4].copy_from_slice(&[3.0, 1.0, 0.0, 2.0]);
    let seq = vec![PoiDistribution::normalized(&raw).unwrap(); 12];
    for cfg in [
        EncoderConfig::default(),
        EncoderConfig {
            layers: 1,
            dilations: vec![1],
            ..EncoderConfig::default()
        },
    ] {
        let model = SpatialModel::new(cfg.clone(), 5).unwrap();
        let z = model.encode(&seq, "c").unwrap().latents;
        let from = cfg.receptive_field() - 1;
        for t in from + 1..12 {
            assert_eq!(z.row(t), z.row(from), "step {t}, layers {}", cfg.layers);
        }
        // The padded warm-up differs.
        assert_ne!(z.row(0), z.row(from));
    }
}

#[test]
fn output_depends_only_on_past_steps() {
    let model = SpatialModel::new(small_config(), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_seq(8, &mut rng);
    let mut b = a.clone();
    b[5] = random_seq(1, &mut rng)[0];
    let (za, zb) = (model.encode(&a, "c").unwrap().latents, model.encode(&b, "c").unwrap().latents);
    for t in 0..5 {
        assert_eq!(za.row(t), zb.row(t));
    }
    assert_ne!(za.row(5), zb.row(5));
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let cfg = small_config();
    let mut store = ParamStore::<f64>::new();
    let enc = Encoder::init(&mut store, &cfg, &mut SeedStream::new(11)).unwrap();
    // Non-zero biases so every path is exercised.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for p in store.iter_mut().filter(|p| p.name.ends_with("bias")) {
        p.value.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
    }
    let seq = random_seq(4, &mut rng);
    let x: Tensor<f64> = semantics_tensor(&[&seq, &seq[..]]);
    let probe = Tensor::from_fn(vec![8, cfg.out_dim], |_| rng.random_range(-1.0..1.0));
    let loss = |g: &mut Graph<'_, f64>, x: Var| -> mobiforge_autodiff::Result<Var> {
        let z = enc.forward(g, x, 4).map_err(|e| TensorError::InvalidArgument {
            op: "encoder",
            msg: e.to_string(),
        })?;
        let p = g.input(probe.clone());
        let t = g.tanh(z)?;
        let m = g.mul(t, p)?;
        g.sum(m)
    };
    let params = check_params(&store, 1e-5, 40, |g| {
        let xv = g.input(x.clone());
        loss(g, xv)
    })
    .unwrap();
    assert!(params.max_rel_error < 1e-3, "{params:?}");
    assert!(params.checked > 100);

    // Input gradients: check_inputs builds parameter-free graphs, so difference by hand.
    let eval = |x: &Tensor<f64>| {
        let mut g = Graph::with_params(&store);
        let xv = g.input(x.clone());
        let l = loss(&mut g, xv).unwrap();
        g.value(l).item()
    };
    let mut g = Graph::with_params(&store);
    let xv = g.input(x.clone());
    let l = loss(&mut g, xv).unwrap();
    let analytic = g.backward(l).unwrap().wrt(xv).unwrap().clone();
    let mut work = x.clone();
    for i in 0..x.numel() {
        let orig = work.data()[i];
        work.data_mut()[i] = orig + 1e-5;
        let up = eval(&work);
        work.data_mut()[i] = orig - 1e-5;
        let down = eval(&work);
        work.data_mut()[i] = orig;
        let err = mobiforge_autodiff::gradcheck::relative_error(analytic.data()[i], (up - down) / 2e-5);
        assert!(err < 1e-3, "input {i}: {err}");
    }
}

#[test]
fn gate_activations_lie_strictly_inside_unit_interval() {
    let model = SpatialModel::new(EncoderConfig::default(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let seqs: Vec<Vec<PoiDistribution>> = (0..16).map(|_| random_seq(9, &mut rng)).collect();
    let refs: Vec<&[PoiDistribution]> = seqs.iter().map(Vec::as_slice).collect();
    let mut g = Graph::with_params(model.encoder_params());
    let x = g.input(semantics_tensor(&refs));
    let (_, gates) = model.encoder().forward_traced(&mut g, x, 9).unwrap();
    assert_eq!(gates.len(), 3);
    for gate in gates {
        assert!(g.value(gate).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn wrong_input_width_is_rejected() {
    let model = SpatialModel::new(small_config(), 1).unwrap();
    let mut g = Graph::with_params(model.encoder_params());
    let x = g.input(Tensor::<f32>::zeros(vec![4, 13]));
    assert!(matches!(
        model.encoder().forward(&mut g, x, 4),
        Err(EmbedError::Shape { expected: 14, got: 13, .. })
    ));
    let seqs = [random_seq(3, &mut ChaCha8Rng::seed_from_u64(0)), random_seq(4, &mut ChaCha8Rng::seed_from_u64(0))];
    assert!(model.encode_batch(&[&seqs[0], &seqs[1]]).is_err());
}

#[test]
fn single_region_decoder_always_answers_zero() {
    let cfg = EncoderConfig::default();
    let dec = CityDecoder::new("tiny", 1, &cfg, 0).unwrap();
    let rep = UnifiedRepresentation::new(Tensor::from_fn(vec![9, 128], |i| (i as f32).sin()), "tiny").unwrap();
    let logits = dec.logits(&rep).unwrap();
    assert_eq!(logits.shape(), &[9, 1]);
    assert_eq!(dec.decode(&rep).unwrap(), vec![0; 9]);
    let wrong = UnifiedRepresentation::new(Tensor::zeros(vec![9, 64]), "tiny").unwrap();
    assert!(matches!(dec.logits(&wrong), Err(EmbedError::Shape { .. })));
    assert!(CityDecoder::new("none", 0, &cfg, 0).is_err());
}

#[test]
fn non_finite_latents_are_rejected() {
    let t = Tensor::new(vec![1, 2], vec![0.0f32, f32::NAN]).unwrap();
    assert!(matches!(UnifiedRepresentation::new(t, "x"), Err(EmbedError::NonFinite)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn encode_preserves_length(len in 1usize..14, batch in 1usize..4, seed in 0u64..1000) {
        let model = SpatialModel::new(small_config(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seqs: Vec<Vec<PoiDistribution>> = (0..batch).map(|_| random_seq(len, &mut rng)).collect();
        let refs: Vec<&[PoiDistribution]> = seqs.iter().map(Vec::as_slice).collect();
        let out = model.encode_batch(&refs).unwrap();
        prop_assert_eq!(out.len(), batch);
        for z in out {
            prop_assert_eq!(z.shape(), &[len, 5]);
            prop_assert!(z.is_finite());
        }
    }

    #[test]
    fn decoding_commutes_with_step_permutation(seed in 0u64..1000) {
        let dec = CityDecoder::new("c", 7, &small_config(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Tensor::from_fn(vec![6, 5], |_| rng.random_range(-2.0f32..2.0));
        let mut perm: Vec<usize> = (0..6).collect();
        perm.rotate_left((seed % 6) as usize);
        perm.swap(0, 5);
        let zp = Tensor::from_fn(vec![6, 5], |i| z.row(perm[i / 5])[i % 5]);
        let (a, b) = (dec.logits_batch(&z).unwrap(), dec.logits_batch(&zp).unwrap());
        for (i, &p) in perm.iter().enumerate() {
            prop_assert_eq!(b.row(i), a.row(p));
        }
    }
}

fn synth_examples(city: &str, regions: usize, agents: usize, seed: u64) -> (CityMap, Vec<EmbedExample>) {
    let c = synth_city(&SynthConfig::new(city, regions, agents, seed)).unwrap();
    let maps = BTreeMap::from([(city.to_string(), c.map.clone())]);
    let ex = embed_examples(&c.trajectories, &maps).unwrap();
    (c.map, ex)
}

#[test]
fn autoencoder_loss_falls_below_a_quarter_of_chance() {
    let (map, ex) = synth_examples("a", 20, 500, 3);
    let maps = BTreeMap::from([("a".to_string(), map)]);
    let (model, report) = train_autoencoder(&ex, &maps, &EncoderConfig::default(), &AutoencoderTrainConfig::default(), 1).unwrap();
    let target = (20f64).ln() / 4.0;
    let reached = report.epoch_losses.iter().position(|&l| l < target);
    assert!(reached.is_some(), "final loss {:?} vs {target}", report.final_loss());
    assert!(reconstruction_accuracy(&model, &ex).unwrap() > 0.9);
}

#[test]
fn untrained_decoder_is_near_chance() {
    let (map, ex) = synth_examples("a", 40, 400, 5);
    let maps = BTreeMap::from([("a".to_string(), map)]);
    let train = AutoencoderTrainConfig {
        epochs: 0,
        ..AutoencoderTrainConfig::default()
    };
    let (model, report) = train_autoencoder(&ex, &maps, &EncoderConfig::default(), &train, 1).unwrap();
    assert!(report.step_losses.is_empty());
    let acc = reconstruction_accuracy(&model, &ex).unwrap();
    assert!(acc < 3.0 / 40.0, "accuracy {acc}");
}

#[test]
fn missing_map_and_bad_regions_are_errors() {
    let (map, ex) = synth_examples("a", 20, 50, 3);
    let none = BTreeMap::new();
    let cfg = AutoencoderTrainConfig::default();
    assert!(matches!(
        train_autoencoder(&ex, &none, &EncoderConfig::default(), &cfg, 0),
        Err(EmbedError::UnknownCity(c)) if c == "a"
    ));
    let mut bad = ex.clone();
    bad[0].regions[0] = 99;
    let maps = BTreeMap::from([("a".to_string(), map)]);
    assert!(matches!(
        train_autoencoder(&bad, &maps, &EncoderConfig::default(), &cfg, 0),
        Err(EmbedError::RegionOutOfRange { region: 99, .. })
    ));
    assert!(matches!(
        train_autoencoder(&[], &maps, &EncoderConfig::default(), &cfg, 0),
        Err(EmbedError::EmptyDataset)
    ));
}

#[test]
fn adaptation_leaves_encoder_bitwise_unchanged() {
    let (map_a, ex_a) = synth_examples("a", 20, 200, 1);
    let (map_b, ex_b) = synth_examples("b", 25, 200, 2);
    let maps = BTreeMap::from([("a".to_string(), map_a)]);
    let train = AutoencoderTrainConfig {
        epochs: 3,
        ..AutoencoderTrainConfig::default()
    };
    let (model, _) = train_autoencoder(&ex_a, &maps, &EncoderConfig::default(), &train, 1).unwrap();
    let before: Vec<Vec<u32>> = model.encoder_params().iter().map(|p| p.value.data().iter().map(|x| x.to_bits()).collect()).collect();
    let adapt = AdaptConfig {
        epochs: 5,
        ..AdaptConfig::default()
    };
    let out = adapt_new_city(&model, &ex_b, &map_b, &adapt, 4).unwrap();
    let after: Vec<Vec<u32>> = model.encoder_params().iter().map(|p| p.value.data().iter().map(|x| x.to_bits()).collect()).collect();
    assert_eq!(before, after);
    assert_eq!(out.used, 10, "5% of 200");
    assert_eq!(out.decoder.num_regions, 25);
    assert!(out.report.final_loss().unwrap() < out.report.epoch_losses[0]);

    assert!(matches!(adapt_new_city(&model, &[], &map_b, &adapt, 4), Err(EmbedError::EmptyDataset)));
    assert!(matches!(adapt_new_city(&model, &ex_a, &map_b, &adapt, 4), Err(EmbedError::WrongCity { .. })));
}

#[test]
fn save_and_load_round_trip() {
    let (map, ex) = synth_examples("a", 20, 60, 1);
    let maps = BTreeMap::from([("a".to_string(), map)]);
    let train = AutoencoderTrainConfig {
        epochs: 1,
        ..AutoencoderTrainConfig::default()
    };
    let (model, _) = train_autoencoder(&ex, &maps, &small_config(), &train, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("embed");
    model.save(&stem).unwrap();
    let back = SpatialModel::load(&stem).unwrap();
    assert_eq!(back.config(), model.config());
    assert_eq!(back.train_size(), 60);
    assert_eq!(back.cities().collect::<Vec<_>>(), vec!["a"]);
    let a = model.encode(&ex[0].semantics, "a").unwrap();
    let b = back.encode(&ex[0].semantics, "a").unwrap();
    assert_eq!(a, b);
    assert_eq!(model.decode(&a, "a").unwrap(), back.decode(&b, "a").unwrap());
    assert!(matches!(back.decode(&a, "zz"), Err(EmbedError::UnknownCity(_))));
}
