//! Membership inference: features, attackers and the evaluation protocol.

use mobiforge_autodiff::{Adam, Graph, Linear, ParamStore, SeedStream, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{best_matches, mean, PrivacyError};
use crate::evaluation::{locnum, radius_of_gyration, travel_distance};
use crate::geo::{CityMap, RegionId};
use crate::trajectory::{TimeSlotting, Trajectory};

pub const NUM_MIA_FEATURES: usize = 7;

/// `[length, distinct regions, mean step distance, radius of gyration, start
/// slot, end slot, share of stays in the most visited region]`.
pub fn mia_features(traj: &Trajectory, map: &CityMap, slotting: TimeSlotting) -> Result<[f64; NUM_MIA_FEATURES], PrivacyError> {
    let (Some(first), Some(last)) = (traj.stays.first(), traj.stays.last()) else {
        return Err(PrivacyError::Empty(format!("trajectory {} has no stays", traj.agent_id)));
    };
    let mut counts = std::collections::BTreeMap::<RegionId, usize>::new();
    for s in &traj.stays {
        *counts.entry(s.region_id).or_default() += 1;
    }
    let top = *counts.values().max().expect("non-empty") as f64;
    let n = traj.len() as f64;
    Ok([
        n,
        locnum(traj) as f64,
        travel_distance(traj, map)?,
        radius_of_gyration(traj, map)?,
        slotting.slot_of(first.timestamp) as f64,
        slotting.slot_of(last.timestamp) as f64,
        top / n,
    ])
}

/// Binary classifier over feature vectors; label `true` means member.
pub trait Attacker {
    fn name(&self) -> &str;
    fn fit(&mut self, x: &[Vec<f64>], y: &[bool]) -> Result<(), PrivacyError>;
    /// Probability of membership.
    fn predict_proba(&self, x: &[f64]) -> f64;
    fn predict_batch(&self, xs: &[Vec<f64>]) -> Vec<f64> {
        xs.iter().map(|x| self.predict_proba(x)).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &[Vec<f64>]) -> Self {
        let d = x[0].len();
        let n = x.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let std = (0..d)
            .map(|j| {
                let v = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if v > 1e-24 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }
}

fn check_training_set(x: &[Vec<f64>], y: &[bool]) -> Result<(), PrivacyError> {
    if x.is_empty() || x.len() != y.len() {
        return Err(PrivacyError::Config(format!("{} feature rows for {} labels", x.len(), y.len())));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(PrivacyError::Config("feature rows must share a positive width".into()));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(PrivacyError::NonFinite);
    }
    if y.iter().all(|&l| l) || y.iter().all(|&l| !l) {
        return Err(PrivacyError::SingleClass);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogisticConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr: 0.5,
            l2: 1e-4,
        }
    }
}

/// Full-batch gradient-descent logistic regression on standardized features.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LogisticAttacker {
    pub config: LogisticConfig,
    scaler: Standardizer,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogisticAttacker {
    pub fn new(config: LogisticConfig) -> Self {
        Self {
            config,
            ..Self::default()
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Attacker for LogisticAttacker {
    fn name(&self) -> &str {
        "logistic_regression"
    }

    fn fit(&mut self, x: &[Vec<f64>], y: &[bool]) -> Result<(), PrivacyError> {
        check_training_set(x, y)?;
        self.scaler = Standardizer::fit(x);
        let xs: Vec<Vec<f64>> = x.iter().map(|r| self.scaler.apply(r)).collect();
        let (d, n) = (xs[0].len(), xs.len() as f64);
        self.weights = vec![0.0; d];
        self.bias = 0.0;
        for _ in 0..self.config.epochs {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (r, &label) in xs.iter().zip(y) {
                let z = self.bias + r.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>();
                let err = sigmoid(z) - f64::from(u8::from(label));
                gb += err;
                gw.iter_mut().zip(r).for_each(|(g, v)| *g += err * v);
            }
            for (w, g) in self.weights.iter_mut().zip(&gw) {
                *w -= self.config.lr * (g / n + self.config.l2 * *w);
            }
            self.bias -= self.config.lr * gb / n;
        }
        if self.weights.iter().any(|w| !w.is_finite()) || !self.bias.is_finite() {
            return Err(PrivacyError::NonFinite);
        }
        Ok(())
    }

    fn predict_proba(&self, x: &[f64]) -> f64 {
        let r = self.scaler.apply(x);
        sigmoid(self.bias + r.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            epochs: 300,
            lr: 1e-2,
            seed: 0,
        }
    }
}

/// One-hidden-layer GELU network trained full-batch with Adam.
pub struct MlpAttacker {
    pub config: MlpConfig,
    scaler: Standardizer,
    store: ParamStore<f64>,
    layers: Option<(Linear, Linear)>,
}

impl MlpAttacker {
    pub fn new(config: MlpConfig) -> Self {
        Self {
            config,
            scaler: Standardizer::default(),
            store: ParamStore::new(),
            layers: None,
        }
    }

    fn logits(&self, g: &mut Graph<'_, f64>, rows: &[Vec<f64>]) -> Result<mobiforge_autodiff::Var, PrivacyError> {
        let (l1, l2) = self.layers.as_ref().ok_or_else(|| PrivacyError::Config("attacker not trained".into()))?;
        let d = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| self.scaler.apply(r)).collect();
        let x = g.input(Tensor::new(vec![rows.len(), d], data)?);
        let h = l1.forward(g, x)?;
        let h = g.gelu(h)?;
        Ok(l2.forward(g, h)?)
    }
}

impl Attacker for MlpAttacker {
    fn name(&self) -> &str {
        "mlp"
    }

    fn fit(&mut self, x: &[Vec<f64>], y: &[bool]) -> Result<(), PrivacyError> {
        check_training_set(x, y)?;
        self.scaler = Standardizer::fit(x);
        self.store = ParamStore::new();
        let mut seeds = SeedStream::new(self.config.seed);
        let l1 = Linear::new(&mut self.store, "attacker/hidden", x[0].len(), self.config.hidden, &mut seeds)?;
        let l2 = Linear::new(&mut self.store, "attacker/out", self.config.hidden, 2, &mut seeds)?;
        self.layers = Some((l1, l2));
        let targets: Vec<usize> = y.iter().map(|&l| usize::from(l)).collect();
        let adam = Adam::with_lr(self.config.lr);
        for _ in 0..self.config.epochs {
            let grads = {
                let mut g = Graph::with_params(&self.store);
                let logits = self.logits(&mut g, x)?;
                let loss = g.cross_entropy(logits, &targets, None)?;
                if !g.value(loss).item().is_finite() {
                    return Err(PrivacyError::NonFinite);
                }
                g.backward(loss)?
            };
            self.store.zero_grad();
            self.store.accumulate(&grads);
            adam.step(&mut self.store);
        }
        Ok(())
    }

    fn predict_proba(&self, x: &[f64]) -> f64 {
        self.predict_batch(&[x.to_vec()])[0]
    }

    fn predict_batch(&self, xs: &[Vec<f64>]) -> Vec<f64> {
        if xs.is_empty() {
            return Vec::new();
        }
        let mut g = Graph::with_params(&self.store);
        let Ok(logits) = self.logits(&mut g, xs) else {
            return vec![0.5; xs.len()];
        };
        let v = g.value(logits);
        (0..xs.len())
            .map(|i| {
                let (a, b) = (v.data()[2 * i], v.data()[2 * i + 1]);
                sigmoid(b - a)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiaConfig {
    /// Neighbours averaged for the second similarity feature.
    pub k: usize,
    /// Largest tolerated relative size difference between the two sets.
    pub max_imbalance: f64,
    pub seed: u64,
    pub jobs: usize,
}

impl Default for MiaConfig {
    fn default() -> Self {
        Self {
            k: 5,
            max_imbalance: 0.1,
            seed: 0,
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub classifier: String,
    /// Balanced accuracy on the held-out half of members and non-members.
    pub success_rate: f64,
    pub n_samples: usize,
    pub n_train: usize,
    pub n_eval: usize,
}

/// The attacker sees each candidate's trajectory features plus its best and
/// mean top-`k` similarity to the generated set. Half of each side trains the
/// attacker; the other half measures balanced accuracy at threshold 0.5.
pub fn membership_inference_attack(
    members: &[Trajectory],
    nonmembers: &[Trajectory],
    generated: &[Trajectory],
    map: &CityMap,
    slotting: TimeSlotting,
    attacker: &mut dyn Attacker,
    cfg: &MiaConfig,
) -> Result<AttackReport, PrivacyError> {
    let (m, n) = (members.len(), nonmembers.len());
    if m < 2 || n < 2 || generated.is_empty() {
        return Err(PrivacyError::Empty("attack needs at least 2 members, 2 non-members and a generated set".into()));
    }
    if (m.abs_diff(n) as f64) > cfg.max_imbalance * m.max(n) as f64 {
        return Err(PrivacyError::Imbalance { members: m, nonmembers: n });
    }
    let pool: Vec<Vec<RegionId>> = generated.iter().map(Trajectory::regions).collect();
    let features = |set: &[Trajectory]| -> Result<Vec<Vec<f64>>, PrivacyError> {
        let q: Vec<Vec<RegionId>> = set.iter().map(Trajectory::regions).collect();
        let (best, _) = best_matches(&q, &pool, cfg.k.max(1), 1, cfg.jobs)?;
        set.iter()
            .zip(best)
            .map(|(t, b)| {
                let mut f = mia_features(t, map, slotting)?.to_vec();
                f.push(b[0]);
                f.push(mean(&b));
                Ok(f)
            })
            .collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut split = |rows: Vec<Vec<f64>>| {
        let mut idx: Vec<usize> = (0..rows.len()).collect();
        idx.shuffle(&mut rng);
        let half = rows.len() / 2;
        let pick = |ids: &[usize]| ids.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>();
        (pick(&idx[..half]), pick(&idx[half..]))
    };
    let (m_train, m_eval) = split(features(members)?);
    let (n_train, n_eval) = split(features(nonmembers)?);

    let x_train: Vec<Vec<f64>> = m_train.iter().chain(&n_train).cloned().collect();
    let y_train: Vec<bool> = std::iter::repeat_n(true, m_train.len()).chain(std::iter::repeat_n(false, n_train.len())).collect();
    attacker.fit(&x_train, &y_train)?;

    let tpr = attacker.predict_batch(&m_eval).iter().filter(|&&p| p >= 0.5).count() as f64 / m_eval.len() as f64;
    let tnr = attacker.predict_batch(&n_eval).iter().filter(|&&p| p < 0.5).count() as f64 / n_eval.len() as f64;
    Ok(AttackReport {
        classifier: attacker.name().to_string(),
        success_rate: 0.5 * (tpr + tnr),
        n_samples: m + n,
        n_train: x_train.len(),
        n_eval: m_eval.len() + n_eval.len(),
    })
}
