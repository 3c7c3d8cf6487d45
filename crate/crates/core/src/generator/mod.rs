//! Conditional diffusion over latent sequences.
//!
//! A [`Generator`] denoises standardized encoder latents. Training draws a step
//! `t` per sample, noises the clean latent with [`DiffusionSchedule::forward_noise`]
//! and regresses the clean latent back (x̂0 objective). Sampling runs the
//! ancestral chain from pure noise, one independent random stream per sample so
//! sample `i` depends only on its own seed.
//!
//! Conditions come in as a [`Condition`]: the start region's POI distribution and
//! one temporal and one semantic row per latent step. Row 0 describes the start
//! stay itself; rows `1..=K` are the planner's forecast for each later stay.

mod dit;
mod pipeline;
mod schedule;

#[cfg(test)]
mod tests;

use std::collections::BTreeMap;
use std::path::Path;

use mobiforge_autodiff::{checkpoint, Adam, Graph, ParamStore, SeedStream, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::{UnifiedRepresentation, SYNTHETIC_SOURCE};
use crate::geo::{PoiDistribution, NUM_POI_CATEGORIES};
use crate::planner::TravelPlan;
use crate::train::TrainReport;

pub use dit::{sinusoidal, ConditionBatch, DiTConfig, Dit, Modulation};
pub use pipeline::{
    generate_batch, generate_trajectory, generator_examples, ConditionSource, GenerateError, GenerationManifest, GenerationRequest,
    Models, PlanSource,
};
pub use schedule::{build_schedule, DiffusionSchedule, Posterior, ScheduleConfig};

#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("invalid generator configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("example {index}: latent has {latent} steps but its plan has {plan}")]
    Unpaired { index: usize, latent: usize, plan: usize },
    #[error("empty training set")]
    EmptyDataset,
    #[error("training diverged at step {0}")]
    Diverged(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Io(String),
}

/// Start anchor plus per-step temporal and semantic guidance.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub start: PoiDistribution,
    /// One slot distribution per step.
    pub temporal: Vec<Vec<f64>>,
    pub semantic: Vec<PoiDistribution>,
    /// Known clean latent of step 0 (raw scale), imposed during sampling.
    pub anchor: Option<Vec<f32>>,
}

fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

impl Condition {
    /// Rows `[start, plan step 1, …, plan step K]`.
    pub fn from_plan(plan: &TravelPlan, start: PoiDistribution, slots_per_day: usize) -> Self {
        let mut temporal = vec![one_hot(slots_per_day, plan.start_slot)];
        temporal.extend(plan.temporal.iter().cloned());
        let mut semantic = vec![start];
        semantic.extend(plan.semantic.iter().copied());
        Self {
            start,
            temporal,
            semantic,
            anchor: None,
        }
    }

    /// Plan built from what actually happened: one-hot slots and true semantics.
    pub fn teacher(slots: &[usize], semantics: &[PoiDistribution], slots_per_day: usize) -> Self {
        Self {
            start: semantics[0],
            temporal: slots.iter().map(|&s| one_hot(slots_per_day, s % slots_per_day)).collect(),
            semantic: semantics.to_vec(),
            anchor: None,
        }
    }

    /// Same start, uninformative plan.
    pub fn uniform(start: PoiDistribution, len: usize, slots_per_day: usize) -> Self {
        Self {
            start,
            temporal: vec![vec![1.0 / slots_per_day as f64; slots_per_day]; len],
            semantic: vec![PoiDistribution::uniform(); len],
            anchor: None,
        }
    }

    /// Fixes step 0 of sampled latents to `latent` (e.g. the encoding of the
    /// start region alone, which a causal encoder reproduces exactly).
    pub fn with_anchor(mut self, latent: Vec<f32>) -> Self {
        self.anchor = Some(latent);
        self
    }

    pub fn len(&self) -> usize {
        self.temporal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.temporal.is_empty()
    }

    /// Truncates, or pads by repeating the last row, to exactly `len` steps.
    pub fn fit(&self, len: usize) -> Self {
        let mut out = self.clone();
        out.temporal.truncate(len);
        out.semantic.truncate(len);
        while out.temporal.len() < len {
            let last = out.temporal.last().cloned().unwrap_or_else(|| one_hot(1, 0));
            out.temporal.push(last);
        }
        while out.semantic.len() < len {
            let last = out.semantic.last().copied().unwrap_or(self.start);
            out.semantic.push(last);
        }
        out
    }

    fn validate(&self, slots_per_day: usize) -> Result<(), GenError> {
        if self.temporal.len() != self.semantic.len() {
            return Err(GenError::Shape(format!(
                "temporal plan has {} steps, semantic plan {}",
                self.temporal.len(),
                self.semantic.len()
            )));
        }
        if let Some(row) = self.temporal.iter().find(|r| r.len() != slots_per_day) {
            return Err(GenError::Shape(format!("slot distribution of width {}, expected {slots_per_day}", row.len())));
        }
        if self.anchor.as_ref().is_some_and(|a| a.iter().any(|v| !v.is_finite())) {
            return Err(GenError::Shape("anchor latent has non-finite entries".into()));
        }
        Ok(())
    }
}

fn condition_batch(conds: &[&Condition], len: usize, slots_per_day: usize) -> ConditionBatch<f32> {
    let batch = conds.len();
    let start = conds.iter().flat_map(|c| c.start.as_f32()).collect();
    let temporal = conds
        .iter()
        .flat_map(|c| c.temporal.iter().flatten().map(|&v| v as f32))
        .collect();
    let semantic = conds.iter().flat_map(|c| c.semantic.iter().flat_map(PoiDistribution::as_f32)).collect();
    ConditionBatch {
        start: Tensor::new(vec![batch, NUM_POI_CATEGORIES], start).expect("14 weights per start"),
        temporal: Tensor::new(vec![batch * len, slots_per_day], temporal).expect("validated widths"),
        semantic: Tensor::new(vec![batch * len, NUM_POI_CATEGORIES], semantic).expect("14 weights per step"),
        batch,
        len,
    }
}

/// Per-dimension standardization of latents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentNormalizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl LatentNormalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Mean and standard deviation of every column over all rows of all latents.
    pub fn fit(latents: &[&Tensor<f32>]) -> Result<Self, GenError> {
        let dim = latents.first().ok_or(GenError::EmptyDataset)?.cols();
        let mut sum = vec![0.0f64; dim];
        let mut sq = vec![0.0f64; dim];
        let mut n = 0usize;
        for z in latents {
            if z.cols() != dim {
                return Err(GenError::Shape(format!("latent dim {} vs {dim}", z.cols())));
            }
            for r in 0..z.rows() {
                for (j, &v) in z.row(r).iter().enumerate() {
                    sum[j] += f64::from(v);
                    sq[j] += f64::from(v) * f64::from(v);
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(GenError::EmptyDataset);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| ((q / n as f64 - m * m).max(0.0).sqrt().max(1e-6)) as f32)
            .collect();
        Ok(Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        })
    }

    pub fn normalize(&self, z: &Tensor<f32>) -> Tensor<f32> {
        let d = self.mean.len();
        Tensor::from_fn(z.shape().to_vec(), |i| (z.data()[i] - self.mean[i % d]) / self.std[i % d])
    }

    pub fn denormalize(&self, z: &Tensor<f32>) -> Tensor<f32> {
        let d = self.mean.len();
        Tensor::from_fn(z.shape().to_vec(), |i| z.data()[i] * self.std[i % d] + self.mean[i % d])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub dit: DiTConfig,
    pub schedule: ScheduleConfig,
    pub latent_dim: usize,
    pub slots_per_day: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            dit: DiTConfig::default(),
            schedule: ScheduleConfig::default(),
            latent_dim: 128,
            slots_per_day: 48,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenTrainConfig {
    pub epochs: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: Option<f64>,
}

impl Default for GenTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            max_steps: None,
            batch_size: 64,
            lr: 1e-3,
            grad_clip: Some(1.0),
        }
    }
}

/// One clean latent sequence and the plan it was produced under.
#[derive(Clone, Debug, PartialEq)]
pub struct GenExample {
    /// Raw encoder output, `[steps, latent_dim]`.
    pub latent: Tensor<f32>,
    pub condition: Condition,
}

/// Trained denoiser with its schedule and latent statistics.
#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    store: ParamStore<f32>,
    net: Dit,
    schedule: DiffusionSchedule,
    normalizer: LatentNormalizer,
    /// 99th percentile of standardized training latent norms (per step row).
    norm_p99: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct GeneratorMeta {
    config: GeneratorConfig,
    normalizer: LatentNormalizer,
    norm_p99: Option<f64>,
}

/// Samples per forward pass while sampling.
const SAMPLE_CHUNK: usize = 256;

impl Generator {
    pub fn new(config: GeneratorConfig, normalizer: LatentNormalizer, seed: u64) -> Result<Self, GenError> {
        if normalizer.mean.len() != config.latent_dim {
            return Err(GenError::Config(format!(
                "normalizer has {} dims, latent_dim is {}",
                normalizer.mean.len(),
                config.latent_dim
            )));
        }
        let schedule = config.schedule.build()?;
        let mut store = ParamStore::new();
        let net = Dit::init(&mut store, config.dit, config.latent_dim, config.slots_per_day, &mut SeedStream::new(seed))?;
        Ok(Self {
            config,
            store,
            net,
            schedule,
            normalizer,
            norm_p99: None,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn normalizer(&self) -> &LatentNormalizer {
        &self.normalizer
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn net(&self) -> &Dit {
        &self.net
    }

    /// Norm above which a generated (standardized) latent row counts as diverged;
    /// infinite before training.
    pub fn divergence_threshold(&self) -> f64 {
        self.norm_p99.map_or(f64::INFINITY, |n| 10.0 * n)
    }

    /// x̂0 for standardized noisy latents `x_t: [batch*len, dim]`.
    pub fn predict_x0(&self, x_t: &Tensor<f32>, t: &[usize], conds: &[&Condition]) -> Result<Tensor<f32>, GenError> {
        let len = conds.first().map_or(0, |c| c.len());
        for c in conds {
            c.validate(self.config.slots_per_day)?;
            if c.len() != len {
                return Err(GenError::Shape("conditions in a batch must share a length".into()));
            }
        }
        let cond = condition_batch(conds, len, self.config.slots_per_day);
        let mut g = Graph::with_params(&self.store);
        let x = g.input(x_t.clone());
        let out = self.net.forward(&mut g, x, t, &cond)?;
        Ok(g.value(out).clone())
    }

    /// Runs the reverse chain for every condition; sample `i` uses only `seeds[i]`.
    /// Returned latents are back in encoder scale.
    pub fn sample(&self, conds: &[Condition], seeds: &[u64]) -> Result<Vec<UnifiedRepresentation>, GenError> {
        if conds.len() != seeds.len() {
            return Err(GenError::Shape(format!("{} conditions but {} seeds", conds.len(), seeds.len())));
        }
        let mut out: Vec<Option<UnifiedRepresentation>> = vec![None; conds.len()];
        let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, c) in conds.iter().enumerate() {
            by_len.entry(c.len()).or_default().push(i);
        }
        for (len, idx) in by_len {
            for chunk in idx.chunks(SAMPLE_CHUNK) {
                let cs: Vec<&Condition> = chunk.iter().map(|&i| &conds[i]).collect();
                let ss: Vec<u64> = chunk.iter().map(|&i| seeds[i]).collect();
                for (z, &i) in self.sample_chunk(&cs, &ss, len)?.into_iter().zip(chunk) {
                    out[i] = Some(z);
                }
            }
        }
        Ok(out.into_iter().map(|z| z.expect("every index sampled")).collect())
    }

    fn sample_chunk(&self, conds: &[&Condition], seeds: &[u64], len: usize) -> Result<Vec<UnifiedRepresentation>, GenError> {
        let d = self.config.latent_dim;
        let per = len * d;
        let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
        let mut x: Vec<f32> = rngs
            .iter_mut()
            .flat_map(|r| (0..per).map(|_| r.sample::<f32, _>(StandardNormal)).collect::<Vec<_>>())
            .collect();
        let n = conds.len();
        let anchors: Vec<Option<Vec<f32>>> = conds
            .iter()
            .map(|c| {
                c.anchor.as_ref().map(|a| {
                    if a.len() == d {
                        Ok(self.normalizer.normalize(&Tensor::new(vec![1, d], a.clone())?).data().to_vec())
                    } else {
                        Err(GenError::Shape(format!("anchor of width {}, expected {d}", a.len())))
                    }
                })
            })
            .map(Option::transpose)
            .collect::<Result<_, _>>()?;
        // Row 0 of each anchored sample follows the forward process of its anchor.
        let impose = |x: &mut [f32], t: usize, rngs: &mut [ChaCha8Rng]| {
            let ab = self.schedule.alpha_bar(t);
            let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
            for (s, anchor) in anchors.iter().enumerate() {
                if let Some(anchor) = anchor {
                    for (j, &v) in anchor.iter().enumerate() {
                        let e = if t > 0 { rngs[s].sample::<f32, _>(StandardNormal) } else { 0.0 };
                        x[s * per + j] = a * v + b * e;
                    }
                }
            }
        };
        impose(&mut x, self.schedule.steps(), &mut rngs);
        for t in (1..=self.schedule.steps()).rev() {
            let xt = Tensor::new(vec![n * len, d], x)?;
            let x0 = self.predict_x0(&xt, &vec![t; n], conds)?;
            let p = self.schedule.posterior(t);
            let sigma = p.variance.sqrt() as f32;
            let (cx0, cxt) = (p.coef_x0 as f32, p.coef_xt as f32);
            let mut next = Vec::with_capacity(n * per);
            for (s, rng) in rngs.iter_mut().enumerate() {
                for j in s * per..(s + 1) * per {
                    let mean = cx0 * x0.data()[j] + cxt * xt.data()[j];
                    let z = if t > 1 { rng.sample::<f32, _>(StandardNormal) } else { 0.0 };
                    next.push(mean + sigma * z);
                }
            }
            x = next;
            impose(&mut x, t - 1, &mut rngs);
        }
        let threshold = self.divergence_threshold();
        (0..n)
            .map(|s| {
                let z = Tensor::new(vec![len, d], x[s * per..(s + 1) * per].to_vec())?;
                let worst = (0..len).map(|r| row_norm(z.row(r))).fold(0.0, f64::max);
                if worst > threshold {
                    log::warn!("sampled latent row norm {worst:.2} exceeds divergence threshold {threshold:.2}");
                }
                UnifiedRepresentation::new(self.normalizer.denormalize(&z), SYNTHETIC_SOURCE)
                    .map_err(|e| GenError::Shape(e.to_string()))
            })
            .collect()
    }

    /// Writes parameters plus `<stem>.config.json` (config, normalizer, norm statistics).
    pub fn save(&self, stem: &Path) -> Result<(), GenError> {
        checkpoint::save(&self.store, stem)?;
        let meta = GeneratorMeta {
            config: self.config.clone(),
            normalizer: self.normalizer.clone(),
            norm_p99: self.norm_p99,
        };
        let text = serde_json::to_string_pretty(&meta).map_err(|e| GenError::Io(e.to_string()))?;
        std::fs::write(stem.with_extension("config.json"), text).map_err(|e| GenError::Io(format!("writing generator config: {e}")))
    }

    pub fn load(stem: &Path) -> Result<Self, GenError> {
        let text = std::fs::read_to_string(stem.with_extension("config.json"))
            .map_err(|e| GenError::Io(format!("reading generator config: {e}")))?;
        let meta: GeneratorMeta = serde_json::from_str(&text).map_err(|e| GenError::Io(format!("generator config: {e}")))?;
        let store = checkpoint::load(stem)?;
        let net = Dit::bind(&store, meta.config.dit)?;
        let schedule = meta.config.schedule.build()?;
        Ok(Self {
            config: meta.config,
            store,
            net,
            schedule,
            normalizer: meta.normalizer,
            norm_p99: meta.norm_p99,
        })
    }
}

fn row_norm(row: &[f32]) -> f64 {
    row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
}

fn percentile(mut xs: Vec<f64>, q: f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let i = ((xs.len() - 1) as f64 * q).round() as usize;
    xs[i]
}

/// Trains a fresh generator on x̂0 regression with uniformly drawn diffusion steps.
///
/// Latents are standardized with statistics fitted on `examples`; batches never
/// mix sequence lengths.
pub fn train_generator(
    examples: &[GenExample],
    config: &GeneratorConfig,
    train: &GenTrainConfig,
    seed: u64,
) -> Result<(Generator, TrainReport), GenError> {
    if examples.is_empty() {
        return Err(GenError::EmptyDataset);
    }
    for (index, e) in examples.iter().enumerate() {
        if e.latent.rows() != e.condition.len() {
            return Err(GenError::Unpaired {
                index,
                latent: e.latent.rows(),
                plan: e.condition.len(),
            });
        }
        e.condition.validate(config.slots_per_day)?;
    }
    let normalizer = LatentNormalizer::fit(&examples.iter().map(|e| &e.latent).collect::<Vec<_>>())?;
    let mut model = Generator::new(config.clone(), normalizer, seed)?;
    let clean: Vec<Tensor<f32>> = examples.iter().map(|e| model.normalizer.normalize(&e.latent)).collect();
    model.norm_p99 = Some(percentile(clean.iter().flat_map(|z| (0..z.rows()).map(|r| row_norm(z.row(r)))).collect(), 0.99));

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        groups.entry(e.latent.rows()).or_default().push(i);
    }
    let adam = Adam::with_lr(train.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6E0E);
    let steps = model.schedule.steps();
    let d = config.latent_dim;
    let mut report = TrainReport::default();
    'epochs: for _ in 0..train.epochs {
        let mut batches = Vec::new();
        for idx in groups.values() {
            let mut idx = idx.clone();
            idx.shuffle(&mut rng);
            batches.extend(idx.chunks(train.batch_size.max(1)).map(<[usize]>::to_vec));
        }
        batches.shuffle(&mut rng);
        let first = report.step_losses.len();
        for batch in batches {
            if train.max_steps.is_some_and(|m| report.step_losses.len() >= m) {
                report.push_epoch(first);
                break 'epochs;
            }
            let len = examples[batch[0]].latent.rows();
            let ts: Vec<usize> = batch.iter().map(|_| rng.random_range(1..=steps)).collect();
            let mut x0 = Vec::with_capacity(batch.len() * len * d);
            let mut xt = Vec::with_capacity(batch.len() * len * d);
            for (&i, &t) in batch.iter().zip(&ts) {
                let ab = model.schedule.alpha_bar(t);
                let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
                for &v in clean[i].data() {
                    let e: f32 = rng.sample(StandardNormal);
                    x0.push(v);
                    xt.push(a * v + b * e);
                }
            }
            let rows = batch.len() * len;
            let conds: Vec<&Condition> = batch.iter().map(|&i| &examples[i].condition).collect();
            let cond = condition_batch(&conds, len, config.slots_per_day);
            let grads = {
                let mut g = Graph::with_params(&model.store);
                let x = g.input(Tensor::new(vec![rows, d], xt)?);
                let target = g.input(Tensor::new(vec![rows, d], x0)?);
                let pred = model.net.forward(&mut g, x, &ts, &cond)?;
                let loss = g.mse(pred, target)?;
                let value = f64::from(g.value(loss).item());
                if !value.is_finite() {
                    return Err(GenError::Diverged(report.step_losses.len()));
                }
                report.step_losses.push(value);
                g.backward(loss)?
            };
            model.store.zero_grad();
            model.store.accumulate(&grads);
            if let Some(c) = train.grad_clip {
                model.store.clip_grad_norm(c);
            }
            adam.step(&mut model.store);
        }
        report.push_epoch(first);
    }
    Ok((model, report))
}
