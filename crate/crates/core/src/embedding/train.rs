//! Autoencoder training and decoder-only adaptation.

use std::collections::BTreeMap;

use mobiforge_autodiff::{Adam, Graph, ParamStore, SeedStream, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{semantics_of, semantics_tensor, subset, CityDecoder, DecoderHead, EmbedError, Encoder, EncoderConfig, SpatialModel};
use crate::geo::{CityMap, PoiDistribution, RegionId};
use crate::train::TrainReport;
use crate::trajectory::Trajectory;

/// One trajectory seen through its city's semantics.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedExample {
    pub city_id: String,
    pub semantics: Vec<PoiDistribution>,
    pub regions: Vec<RegionId>,
}

/// Looks up the semantics of every stay; each trajectory's city must be in `maps`.
pub fn embed_examples(trajs: &[Trajectory], maps: &BTreeMap<String, CityMap>) -> Result<Vec<EmbedExample>, EmbedError> {
    trajs
        .iter()
        .filter(|t| !t.stays.is_empty())
        .map(|t| {
            let map = maps.get(&t.city_id).ok_or_else(|| EmbedError::UnknownCity(t.city_id.clone()))?;
            Ok(EmbedExample {
                city_id: t.city_id.clone(),
                semantics: semantics_of(t, map)?,
                regions: t.regions(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for AutoencoderTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            lr: 2e-3,
        }
    }
}

/// Mini-batches that never mix cities or sequence lengths.
fn grouped_batches(examples: &[EmbedExample], batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<(&str, usize), Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        groups.entry((e.city_id.as_str(), e.semantics.len())).or_default().push(i);
    }
    let mut out = Vec::new();
    for mut idx in groups.into_values() {
        idx.shuffle(rng);
        out.extend(idx.chunks(batch.max(1)).map(<[usize]>::to_vec));
    }
    out.shuffle(rng);
    out
}

fn batch_inputs(examples: &[EmbedExample], batch: &[usize]) -> (Tensor<f32>, Vec<usize>, usize) {
    let seqs: Vec<&[PoiDistribution]> = batch.iter().map(|&i| examples[i].semantics.as_slice()).collect();
    let targets = batch.iter().flat_map(|&i| examples[i].regions.iter().copied()).collect();
    (semantics_tensor(&seqs), targets, seqs[0].len())
}

fn check_regions(examples: &[EmbedExample], city: &str, regions: usize) -> Result<(), EmbedError> {
    for e in examples {
        if let Some(&r) = e.regions.iter().find(|&&r| r >= regions) {
            return Err(EmbedError::RegionOutOfRange {
                city: city.to_string(),
                region: r,
                regions,
            });
        }
    }
    Ok(())
}

/// Jointly trains the shared encoder and one decoder per city on
/// region-reconstruction cross-entropy.
///
/// Every city in `examples` needs a map (which fixes its decoder's output size).
/// Each optimizer step draws its batch from a single city and only updates the
/// encoder and that city's decoder.
pub fn train_autoencoder(
    examples: &[EmbedExample],
    maps: &BTreeMap<String, CityMap>,
    config: &EncoderConfig,
    train: &AutoencoderTrainConfig,
    seed: u64,
) -> Result<(SpatialModel, TrainReport), EmbedError> {
    if examples.is_empty() {
        return Err(EmbedError::EmptyDataset);
    }
    let mut seeds = SeedStream::new(seed);
    let mut store = ParamStore::<f32>::new();
    let encoder = Encoder::init(&mut store, config, &mut seeds)?;
    let mut heads = BTreeMap::new();
    for e in examples {
        if heads.contains_key(&e.city_id) {
            continue;
        }
        let map = maps.get(&e.city_id).ok_or_else(|| EmbedError::UnknownCity(e.city_id.clone()))?;
        let head = DecoderHead::init(&mut store, &e.city_id, config.out_dim, config.decoder_hidden, map.num_regions(), &mut seeds)?;
        heads.insert(e.city_id.clone(), head);
    }
    for (city, head) in &heads {
        let of_city: Vec<EmbedExample> = examples.iter().filter(|e| &e.city_id == city).cloned().collect();
        check_regions(&of_city, city, head.out.fan_out)?;
    }

    let adam = Adam::with_lr(train.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.next_seed());
    let mut report = TrainReport::default();
    for _ in 0..train.epochs {
        let first = report.step_losses.len();
        for batch in grouped_batches(examples, train.batch_size, &mut rng) {
            let head = heads[&examples[batch[0]].city_id];
            let (x, targets, len) = batch_inputs(examples, &batch);
            let grads = {
                let mut g = Graph::with_params(&store);
                let x = g.input(x);
                let z = encoder.forward(&mut g, x, len)?;
                let logits = head.forward(&mut g, z)?;
                let loss = g.cross_entropy(logits, &targets, None)?;
                report.step_losses.push(f64::from(g.value(loss).item()));
                g.backward(loss)?
            };
            store.zero_grad();
            store.accumulate(&grads);
            adam.step_only(&mut store, grads.param_ids().collect::<Vec<_>>());
        }
        report.push_epoch(first);
    }

    let encoder_store = subset(&store, "encoder/")?;
    let mut decoders = BTreeMap::new();
    for city in heads.keys() {
        let dec_store = subset(&store, &super::decoder_prefix(city))?;
        decoders.insert(city.clone(), CityDecoder::from_store(city, dec_store)?);
    }
    let model = SpatialModel::from_parts(config.clone(), encoder_store, decoders, examples.len())?;
    Ok((model, report))
}

/// Top-1 fraction of steps whose decoded region equals the true one.
pub fn reconstruction_accuracy(model: &SpatialModel, examples: &[EmbedExample]) -> Result<f64, EmbedError> {
    let (mut hits, mut total) = (0usize, 0usize);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for batch in grouped_batches(examples, 256, &mut rng) {
        let dec = model.decoder(&examples[batch[0]].city_id)?;
        let seqs: Vec<&[PoiDistribution]> = batch.iter().map(|&i| examples[i].semantics.as_slice()).collect();
        for (z, &i) in model.encode_batch(&seqs)?.iter().zip(&batch) {
            let pred = dec.logits_batch(z)?.argmax_rows();
            hits += pred.iter().zip(&examples[i].regions).filter(|(p, t)| p == t).count();
            total += pred.len();
        }
    }
    if total == 0 {
        return Err(EmbedError::EmptyDataset);
    }
    Ok(hits as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Trajectory budget; `None` means `fraction` of the encoder's training set size.
    pub budget: Option<usize>,
    pub fraction: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 2e-3,
            budget: None,
            fraction: 0.05,
        }
    }
}

impl AdaptConfig {
    pub fn budget_for(&self, train_size: usize) -> usize {
        self.budget
            .unwrap_or_else(|| (self.fraction * train_size as f64).ceil() as usize)
            .max(1)
    }
}

/// Result of fitting a decoder for a new city.
#[derive(Clone, Debug)]
pub struct Adaptation {
    pub decoder: CityDecoder,
    pub report: TrainReport,
    /// Trajectories actually used (after applying the budget).
    pub used: usize,
}

/// Fits a decoder for `map`'s city while the encoder stays fixed.
///
/// Latents are computed once from the frozen encoder; only the new decoder's
/// parameters receive updates. At most [`AdaptConfig::budget_for`] trajectories
/// are drawn (seeded) from `examples`.
pub fn adapt_new_city(
    model: &SpatialModel,
    examples: &[EmbedExample],
    map: &CityMap,
    cfg: &AdaptConfig,
    seed: u64,
) -> Result<Adaptation, EmbedError> {
    if examples.is_empty() {
        return Err(EmbedError::EmptyDataset);
    }
    if let Some(e) = examples.iter().find(|e| e.city_id != map.city_id) {
        return Err(EmbedError::WrongCity {
            expected: map.city_id.clone(),
            found: e.city_id.clone(),
        });
    }
    check_regions(examples, &map.city_id, map.num_regions())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    order.truncate(cfg.budget_for(model.train_size()));
    let chosen: Vec<EmbedExample> = order.iter().map(|&i| examples[i].clone()).collect();

    // Frozen encoder: latents once, as plain inputs.
    let mut latents: Vec<Tensor<f32>> = vec![Tensor::zeros(vec![0]); chosen.len()];
    for batch in grouped_batches(&chosen, 256, &mut rng) {
        let seqs: Vec<&[PoiDistribution]> = batch.iter().map(|&i| chosen[i].semantics.as_slice()).collect();
        for (z, &i) in model.encode_batch(&seqs)?.into_iter().zip(&batch) {
            latents[i] = z;
        }
    }

    let mut decoder = CityDecoder::new(&map.city_id, map.num_regions(), model.config(), seed ^ 0xDEC0)?;
    let adam = Adam::with_lr(cfg.lr);
    let mut report = TrainReport::default();
    for _ in 0..cfg.epochs {
        let first = report.step_losses.len();
        for batch in grouped_batches(&chosen, cfg.batch_size, &mut rng) {
            let d = model.config().out_dim;
            let rows: usize = batch.iter().map(|&i| chosen[i].regions.len()).sum();
            let data: Vec<f32> = batch.iter().flat_map(|&i| latents[i].data().iter().copied()).collect();
            let z = Tensor::new(vec![rows, d], data)?;
            let targets: Vec<usize> = batch.iter().flat_map(|&i| chosen[i].regions.iter().copied()).collect();
            let grads = {
                let mut g = Graph::with_params(&decoder.store);
                let z = g.input(z);
                let logits = decoder.head.forward(&mut g, z)?;
                let loss = g.cross_entropy(logits, &targets, None)?;
                report.step_losses.push(f64::from(g.value(loss).item()));
                g.backward(loss)?
            };
            decoder.store.zero_grad();
            decoder.store.accumulate(&grads);
            adam.step(&mut decoder.store);
        }
        report.push_epoch(first);
    }
    Ok(Adaptation {
        decoder,
        report,
        used: chosen.len(),
    })
}
