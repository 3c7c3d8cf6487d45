//! Downstream utility: a shallow next-region classifier trained on real and
//! synthetic transitions, scored on real test transitions.

use mobiforge_autodiff::{Adam, Graph, ParamStore};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PrivacyError;
use crate::geo::RegionId;
use crate::trajectory::{TimeSlotting, Trajectory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 256,
            lr: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Synthetic transitions added, as a multiple of the real training count.
    pub ratio: f64,
    pub accuracy: f64,
    pub n_train: usize,
}

/// `(previous region, slot of the previous stay, next region)` triples.
fn transitions(trajs: &[Trajectory], slotting: TimeSlotting, regions: usize) -> Result<Vec<(usize, usize, usize)>, PrivacyError> {
    let mut out = Vec::new();
    for t in trajs {
        for w in t.stays.windows(2) {
            let (a, b): (RegionId, RegionId) = (w[0].region_id, w[1].region_id);
            if a >= regions || b >= regions {
                return Err(PrivacyError::Config(format!("region {} outside the {regions}-region universe", a.max(b))));
            }
            out.push((a, slotting.slot_of(w[0].timestamp), b));
        }
    }
    Ok(out)
}

struct Probe {
    store: ParamStore<f32>,
}

impl Probe {
    fn new(regions: usize, slots: usize) -> Result<Self, PrivacyError> {
        let mut store = ParamStore::new();
        store.add_zeros("probe/region", &[regions, regions])?;
        store.add_zeros("probe/slot", &[slots, regions])?;
        Ok(Self { store })
    }

    fn logits(&self, g: &mut Graph<'_, f32>, rows: &[(usize, usize, usize)]) -> Result<mobiforge_autodiff::Var, PrivacyError> {
        let r = g.param(self.store.require("probe/region")?)?;
        let s = g.param(self.store.require("probe/slot")?)?;
        let prev: Vec<usize> = rows.iter().map(|x| x.0).collect();
        let slot: Vec<usize> = rows.iter().map(|x| x.1).collect();
        let a = g.embedding(r, &prev)?;
        let b = g.embedding(s, &slot)?;
        Ok(g.add(a, b)?)
    }

    fn accuracy(&self, rows: &[(usize, usize, usize)]) -> Result<f64, PrivacyError> {
        if rows.is_empty() {
            return Err(PrivacyError::Empty("no real test transitions".into()));
        }
        let mut g = Graph::with_params(&self.store);
        let logits = self.logits(&mut g, rows)?;
        let pred = g.value(logits).argmax_rows();
        let hits = pred.iter().zip(rows).filter(|(p, r)| **p == r.2).count();
        Ok(hits as f64 / rows.len() as f64)
    }
}

/// Trains one probe per ratio on the real transitions plus
/// `round(ratio · n_real)` synthetic transitions (drawn with replacement when
/// the synthetic pool is smaller) and reports top-1 accuracy on `real_test`.
pub fn utility_probe(
    real_train: &[Trajectory],
    synthetic: &[Trajectory],
    real_test: &[Trajectory],
    ratios: &[f64],
    regions: usize,
    slotting: TimeSlotting,
    cfg: &ProbeConfig,
) -> Result<Vec<ProbeResult>, PrivacyError> {
    if regions == 0 || cfg.batch_size == 0 {
        return Err(PrivacyError::Config("regions and batch_size must be positive".into()));
    }
    let real = transitions(real_train, slotting, regions)?;
    let synth = transitions(synthetic, slotting, regions)?;
    let test = transitions(real_test, slotting, regions)?;
    let mut results = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        if !(ratio >= 0.0 && ratio.is_finite()) {
            return Err(PrivacyError::Config(format!("mix ratio {ratio} must be a non-negative number")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let extra = (ratio * real.len() as f64).round() as usize;
        if extra > 0 && synth.is_empty() {
            return Err(PrivacyError::Empty("no synthetic transitions to mix in".into()));
        }
        let mut rows = real.clone();
        rows.extend((0..extra).map(|i| synth[i % synth.len()]));
        if rows.is_empty() {
            return Err(PrivacyError::Empty("no training transitions".into()));
        }
        let probe = train(&mut rows, regions, slotting.slots_per_day(), cfg, &mut rng)?;
        results.push(ProbeResult {
            ratio,
            accuracy: probe.accuracy(&test)?,
            n_train: rows.len(),
        });
    }
    Ok(results)
}

fn train(rows: &mut [(usize, usize, usize)], regions: usize, slots: usize, cfg: &ProbeConfig, rng: &mut ChaCha8Rng) -> Result<Probe, PrivacyError> {
    let mut probe = Probe::new(regions, slots)?;
    let adam = Adam::with_lr(cfg.lr);
    for _ in 0..cfg.epochs {
        rows.shuffle(rng);
        for batch in rows.chunks(cfg.batch_size) {
            let grads = {
                let mut g = Graph::with_params(&probe.store);
                let logits = probe.logits(&mut g, batch)?;
                let targets: Vec<usize> = batch.iter().map(|x| x.2).collect();
                let loss = g.cross_entropy(logits, &targets, None)?;
                g.backward(loss)?
            };
            probe.store.zero_grad();
            probe.store.accumulate(&grads);
            adam.step(&mut probe.store);
        }
    }
    Ok(probe)
}
