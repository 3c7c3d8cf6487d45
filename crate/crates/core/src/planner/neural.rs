use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use mobiforge_autodiff::{checkpoint, Adam, Graph, Linear, ParamId, ParamStore, Real, SeedStream, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::loss::{planner_loss_graph, PlannerLossConfig, PlannerTarget};
use super::{PlannerBackend, PlannerError, PlannerQuery, PlannerResponse};
use crate::geo::{CityMap, PoiDistribution, NUM_POI_CATEGORIES};
use crate::train::{Batcher, TrainReport};
use crate::trajectory::{TimeSlotting, Trajectory, TrajectoryError};

/// Architecture of the feed-forward planner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuralPlannerConfig {
    pub slots_per_day: usize,
    pub hidden: usize,
    pub role_dim: usize,
    /// Known roles; embedding row 0 is reserved for "no role".
    pub roles: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub loss: PlannerLossConfig,
    pub label_smoothing: f64,
    pub hidden: usize,
    pub role_dim: usize,
}

impl Default for PlannerTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            loss: PlannerLossConfig::default(),
            label_smoothing: 0.0,
            hidden: 128,
            role_dim: 16,
        }
    }
}

/// One consecutive stay pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannerExample {
    pub slot: usize,
    pub semantics: PoiDistribution,
    pub role: Option<String>,
    pub next_slot: usize,
    pub next_semantics: PoiDistribution,
}

/// Extracts every consecutive (stay, next stay) pair.
pub fn planner_examples(
    trajs: &[Trajectory],
    maps: &BTreeMap<String, CityMap>,
    roles: &BTreeMap<String, String>,
    slotting: TimeSlotting,
) -> Result<Vec<PlannerExample>, TrajectoryError> {
    let mut out = Vec::new();
    for t in trajs {
        let map = maps
            .get(&t.city_id)
            .ok_or_else(|| TrajectoryError::MissingCity(t.city_id.clone()))?;
        let role = roles.get(&t.agent_id).cloned();
        for w in t.stays.windows(2) {
            out.push(PlannerExample {
                slot: slotting.slot_of(w[0].timestamp),
                semantics: *map.semantics_of(w[0].region_id)?,
                role: role.clone(),
                next_slot: slotting.slot_of(w[1].timestamp),
                next_semantics: *map.semantics_of(w[1].region_id)?,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
struct Net {
    roles: ParamId,
    hidden1: Linear,
    hidden2: Linear,
    time_head: Linear,
    poi_head: Linear,
}

const PREFIX: &str = "planner";

impl Net {
    fn build<T: Real>(store: &mut ParamStore<T>, cfg: &NeuralPlannerConfig, seed: u64) -> Result<Self, PlannerError> {
        let mut seeds = SeedStream::new(seed);
        let input = cfg.slots_per_day + NUM_POI_CATEGORIES + cfg.role_dim;
        Ok(Self {
            roles: store.add_xavier(
                format!("{PREFIX}/role_embedding"),
                &[cfg.roles.len() + 1, cfg.role_dim],
                seeds.next_seed(),
            )?,
            hidden1: Linear::new(store, &format!("{PREFIX}/hidden1"), input, cfg.hidden, &mut seeds)?,
            hidden2: Linear::new(store, &format!("{PREFIX}/hidden2"), cfg.hidden, cfg.hidden, &mut seeds)?,
            time_head: Linear::new(store, &format!("{PREFIX}/time_head"), cfg.hidden, cfg.slots_per_day, &mut seeds)?,
            poi_head: Linear::new(store, &format!("{PREFIX}/poi_head"), cfg.hidden, NUM_POI_CATEGORIES, &mut seeds)?,
        })
    }

    fn bind<T: Real>(store: &ParamStore<T>) -> Result<Self, PlannerError> {
        Ok(Self {
            roles: store.require(&format!("{PREFIX}/role_embedding"))?,
            hidden1: Linear::bind(store, &format!("{PREFIX}/hidden1"))?,
            hidden2: Linear::bind(store, &format!("{PREFIX}/hidden2"))?,
            time_head: Linear::bind(store, &format!("{PREFIX}/time_head"))?,
            poi_head: Linear::bind(store, &format!("{PREFIX}/poi_head"))?,
        })
    }

    /// Returns `(time_logits [B, S], poi_logits [B, 14])`.
    fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        slots_per_day: usize,
        rows: &[(usize, &PoiDistribution, usize)],
    ) -> mobiforge_autodiff::Result<(Var, Var)> {
        let width = slots_per_day + NUM_POI_CATEGORIES;
        let mut x = vec![T::zero(); rows.len() * width];
        for (i, (slot, sem, _)) in rows.iter().enumerate() {
            let row = &mut x[i * width..(i + 1) * width];
            row[*slot] = T::one();
            for (dst, &w) in row[slots_per_day..].iter_mut().zip(sem.weights()) {
                *dst = T::of(w);
            }
        }
        let x = g.input(Tensor::new(vec![rows.len(), width], x)?);
        let table = g.param(self.roles)?;
        let ids: Vec<usize> = rows.iter().map(|r| r.2).collect();
        let role = g.embedding(table, &ids)?;
        let h = g.concat(&[x, role], 1)?;
        let h = self.hidden1.forward(g, h)?;
        let h = g.gelu(h)?;
        let h = self.hidden2.forward(g, h)?;
        let h = g.gelu(h)?;
        Ok((self.time_head.forward(g, h)?, self.poi_head.forward(g, h)?))
    }
}

/// Trainable feed-forward planner backend.
#[derive(Clone, Debug)]
pub struct NeuralPlanner {
    config: NeuralPlannerConfig,
    store: ParamStore<f32>,
    net: Net,
}

impl NeuralPlanner {
    pub fn new(config: NeuralPlannerConfig, seed: u64) -> Result<Self, PlannerError> {
        if config.slots_per_day == 0 || config.hidden == 0 {
            return Err(PlannerError::Config("slots_per_day and hidden must be positive".into()));
        }
        let mut store = ParamStore::new();
        let net = Net::build(&mut store, &config, seed)?;
        Ok(Self { config, store, net })
    }

    pub fn config(&self) -> &NeuralPlannerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    fn role_index(&self, role: Option<&str>) -> usize {
        role.and_then(|r| self.config.roles.iter().position(|x| x == r))
            .map_or(0, |i| i + 1)
    }

    /// Batched forward pass in single precision.
    pub fn predict(&self, rows: &[(usize, PoiDistribution, Option<&str>)]) -> Result<Vec<PlannerResponse>, PlannerError> {
        if let Some(r) = rows.iter().find(|r| r.0 >= self.config.slots_per_day) {
            return Err(PlannerError::Config(format!("slot {} out of range", r.0)));
        }
        let indexed: Vec<(usize, &PoiDistribution, usize)> = rows
            .iter()
            .map(|(s, d, r)| (*s, d, self.role_index(*r)))
            .collect();
        let mut g = Graph::with_params(&self.store);
        let (time, poi) = self.net.forward(&mut g, self.config.slots_per_day, &indexed)?;
        let (time, poi) = (g.value(time), g.value(poi));
        Ok((0..rows.len())
            .map(|i| PlannerResponse {
                time_logits: time.row(i).iter().map(|&x| f64::from(x)).collect(),
                poi_logits: poi.row(i).iter().map(|&x| f64::from(x)).collect(),
            })
            .collect())
    }

    /// Mean loss over `examples` without updating parameters.
    pub fn evaluate(&self, examples: &[PlannerExample], cfg: &PlannerTrainConfig) -> Result<f64, PlannerError> {
        if examples.is_empty() {
            return Err(PlannerError::EmptyDataset);
        }
        let idx: Vec<usize> = (0..examples.len()).collect();
        let mut total = 0.0;
        for chunk in idx.chunks(256) {
            let mut g = Graph::with_params(&self.store);
            let loss = self.batch_loss(&mut g, examples, chunk, cfg)?;
            total += f64::from(g.value(loss).item()) * chunk.len() as f64;
        }
        Ok(total / examples.len() as f64)
    }

    fn batch_loss(
        &self,
        g: &mut Graph<'_, f32>,
        examples: &[PlannerExample],
        batch: &[usize],
        cfg: &PlannerTrainConfig,
    ) -> Result<Var, PlannerError> {
        let spd = self.config.slots_per_day;
        let rows: Vec<(usize, &PoiDistribution, usize)> = batch
            .iter()
            .map(|&i| {
                let e = &examples[i];
                (e.slot, &e.semantics, self.role_index(e.role.as_deref()))
            })
            .collect();
        let mut y_time = Vec::with_capacity(batch.len() * spd);
        let mut y_poi = Vec::with_capacity(batch.len() * NUM_POI_CATEGORIES);
        for &i in batch {
            let e = &examples[i];
            let t = PlannerTarget::new(e.next_slot, spd, e.next_semantics, cfg.label_smoothing);
            y_time.extend(t.y_time.iter().map(|&x| x as f32));
            y_poi.extend(e.next_semantics.as_f32());
        }
        let y_time = Tensor::new(vec![batch.len(), spd], y_time)?;
        let y_poi = Tensor::new(vec![batch.len(), NUM_POI_CATEGORIES], y_poi)?;
        let (time, poi) = self.net.forward(g, spd, &rows)?;
        Ok(planner_loss_graph(g, time, poi, &y_time, &y_poi, cfg.loss.lambda)?)
    }

    /// Writes `<stem>.bin`, `<stem>.json` and `<stem>.config.json`.
    pub fn save(&self, stem: &Path) -> Result<(), PlannerError> {
        checkpoint::save(&self.store, stem)?;
        let cfg = serde_json::to_string_pretty(&self.config).map_err(|e| PlannerError::Config(e.to_string()))?;
        std::fs::write(stem.with_extension("config.json"), cfg)
            .map_err(|e| PlannerError::Config(format!("writing planner config: {e}")))?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self, PlannerError> {
        let text = std::fs::read_to_string(stem.with_extension("config.json"))
            .map_err(|e| PlannerError::Config(format!("reading planner config: {e}")))?;
        let config: NeuralPlannerConfig = serde_json::from_str(&text).map_err(|e| PlannerError::Config(e.to_string()))?;
        let store = checkpoint::load(stem)?;
        let net = Net::bind(&store)?;
        Ok(Self { config, store, net })
    }
}

impl PlannerBackend for NeuralPlanner {
    fn id(&self) -> String {
        format!(
            "neural-ffn(hidden={},roles={},params={})",
            self.config.hidden,
            self.config.roles.len(),
            self.store.num_elements()
        )
    }

    fn slots_per_day(&self) -> usize {
        self.config.slots_per_day
    }

    fn infer(&self, query: &PlannerQuery) -> Result<PlannerResponse, PlannerError> {
        let role = query.role.as_ref().map(|r| r.name.as_str());
        let mut out = self.predict(&[(query.current_slot, query.current_semantics, role)])?;
        Ok(out.remove(0))
    }
}

/// Trains a planner on consecutive stay pairs with the dual-KL objective.
pub fn train_neural_backend(
    examples: &[PlannerExample],
    slotting: TimeSlotting,
    cfg: &PlannerTrainConfig,
    seed: u64,
) -> Result<(NeuralPlanner, TrainReport), PlannerError> {
    if examples.is_empty() {
        return Err(PlannerError::EmptyDataset);
    }
    if !(0.0..1.0).contains(&cfg.label_smoothing) {
        return Err(PlannerError::Config(format!(
            "label_smoothing must be in [0, 1), got {}",
            cfg.label_smoothing
        )));
    }
    let roles: BTreeSet<String> = examples.iter().filter_map(|e| e.role.clone()).collect();
    let config = NeuralPlannerConfig {
        slots_per_day: slotting.slots_per_day(),
        hidden: cfg.hidden,
        role_dim: cfg.role_dim,
        roles: roles.into_iter().collect(),
    };
    let mut model = NeuralPlanner::new(config, seed)?;
    let adam = Adam::with_lr(cfg.lr);
    let mut batcher = Batcher::new(examples.len(), cfg.batch_size, seed ^ 0x5EED);
    let mut report = TrainReport::default();
    for _ in 0..cfg.epochs {
        let first = report.step_losses.len();
        for batch in batcher.epoch() {
            let grads = {
                let mut g = Graph::with_params(&model.store);
                let loss = model.batch_loss(&mut g, examples, &batch, cfg)?;
                report.step_losses.push(f64::from(g.value(loss).item()));
                g.backward(loss)?
            };
            model.store.zero_grad();
            model.store.accumulate(&grads);
            adam.step(&mut model.store);
        }
        report.push_epoch(first);
    }
    Ok((model, report))
}
