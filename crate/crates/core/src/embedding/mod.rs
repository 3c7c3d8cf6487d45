//! Shared semantic encoder and per-city region decoders.
//!
//! The encoder reads a sequence of POI distributions (one per stay) and emits a
//! latent vector per step that does not depend on any city's region numbering.
//! Each layer is a gated causal convolution with a residual path:
//!
//! ```text
//! Ψ = (W_ker * E + b_ker) ⊙ σ(W_g * E + b_g) + E′
//! ```
//!
//! where `E′` is `E` itself, or a 1×1 projection of it when the channel count
//! changes. Layer inputs beyond the second also receive 1×1-projected copies of
//! every earlier layer's output (the correlation injection). A final linear map
//! takes the top layer to `out_dim` channels.
//!
//! A [`CityDecoder`] is a small two-layer network from latents to region logits.
//! Decoders are trained jointly with the encoder ([`train_autoencoder`]) or
//! fitted alone against a frozen encoder for a new city ([`adapt_new_city`]).

mod train;

#[cfg(test)]
mod tests;

use std::collections::BTreeMap;
use std::path::Path;

use mobiforge_autodiff::{checkpoint, Graph, Linear, ParamId, ParamStore, Real, SeedStream, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::geo::{CityMap, GeoError, PoiDistribution, RegionId, NUM_POI_CATEGORIES};
use crate::trajectory::{Trajectory, TrajectoryError};

pub use train::{
    adapt_new_city, embed_examples, reconstruction_accuracy, train_autoencoder, AdaptConfig, Adaptation,
    AutoencoderTrainConfig, EmbedExample,
};

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("invalid encoder configuration: {0}")]
    Config(String),
    #[error("{what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("no decoder for city {0:?}")]
    UnknownCity(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("example for city {found:?} passed where {expected:?} was expected")]
    WrongCity { expected: String, found: String },
    #[error("region {region} out of range for city {city:?} with {regions} regions")]
    RegionOutOfRange {
        city: String,
        region: RegionId,
        regions: usize,
    },
    #[error("latents contain non-finite values")]
    NonFinite,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("{0}")]
    Io(String),
}

/// Shape of the encoder and of the decoder heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub kernel: usize,
    /// One dilation per layer.
    pub dilations: Vec<usize>,
    pub out_dim: usize,
    pub decoder_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            hidden: 32,
            kernel: 3,
            dilations: vec![1, 1, 1],
            out_dim: 128,
            decoder_hidden: 256,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        let bad = |m: String| Err(EmbedError::Config(m));
        if self.layers == 0 || self.hidden == 0 || self.out_dim == 0 || self.decoder_hidden == 0 {
            return bad(format!("layers, hidden, out_dim and decoder_hidden must be positive: {self:?}"));
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel must be odd, got {}", self.kernel));
        }
        if self.dilations.len() != self.layers {
            return bad(format!("{} dilations for {} layers", self.dilations.len(), self.layers));
        }
        if self.dilations.contains(&0) {
            return bad("dilations must be >= 1".into());
        }
        Ok(())
    }

    /// Number of trailing input steps that influence one output step.
    pub fn receptive_field(&self) -> usize {
        1 + (self.kernel - 1) * self.dilations.iter().sum::<usize>()
    }
}

/// Latent sequence for one trajectory, `[steps, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct UnifiedRepresentation {
    pub latents: Tensor<f32>,
    /// City the sequence was encoded from, or `"synthetic"` for generated latents.
    pub source_city: String,
}

impl UnifiedRepresentation {
    pub fn new(latents: Tensor<f32>, source_city: impl Into<String>) -> Result<Self, EmbedError> {
        if latents.shape().len() != 2 {
            return Err(EmbedError::Config(format!("latents must be 2-D, got {:?}", latents.shape())));
        }
        if !latents.is_finite() {
            return Err(EmbedError::NonFinite);
        }
        Ok(Self {
            latents,
            source_city: source_city.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.latents.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.latents.cols()
    }
}

#[derive(Clone, Debug)]
struct GatedLayer {
    kernel_w: ParamId,
    kernel_b: ParamId,
    gate_w: ParamId,
    gate_b: ParamId,
    residual: Option<ParamId>,
    /// `(source layer, 1×1 weight)` pairs added into this layer's input.
    inject: Vec<(usize, ParamId)>,
    dilation: usize,
}

/// Parameter handles of the encoder inside some store.
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    layers: Vec<GatedLayer>,
    proj: Linear,
}

fn layer_name(l: usize, part: &str) -> String {
    format!("encoder/layer{l}/{part}")
}

impl Encoder {
    /// Adds freshly initialized encoder parameters to `store`.
    pub fn init<T: Real>(store: &mut ParamStore<T>, config: &EncoderConfig, seeds: &mut SeedStream) -> Result<Self, EmbedError> {
        config.validate()?;
        let h = config.hidden;
        for l in 0..config.layers {
            let cin = if l == 0 { NUM_POI_CATEGORIES } else { h };
            store.add_xavier(layer_name(l, "kernel.weight"), &[config.kernel, cin, h], seeds.next_seed())?;
            store.add_zeros(layer_name(l, "kernel.bias"), &[h])?;
            store.add_xavier(layer_name(l, "gate.weight"), &[config.kernel, cin, h], seeds.next_seed())?;
            store.add_zeros(layer_name(l, "gate.bias"), &[h])?;
            if cin != h {
                store.add_xavier(layer_name(l, "residual.weight"), &[cin, h], seeds.next_seed())?;
            }
            for j in 0..l.saturating_sub(1) {
                store.add_xavier(layer_name(l, &format!("inject{j}.weight")), &[h, h], seeds.next_seed())?;
            }
        }
        Linear::new(store, "encoder/proj", h, config.out_dim, seeds)?;
        Self::bind(store, config)
    }

    /// Looks up encoder parameters by name.
    pub fn bind<T: Real>(store: &ParamStore<T>, config: &EncoderConfig) -> Result<Self, EmbedError> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let cin = if l == 0 { NUM_POI_CATEGORIES } else { config.hidden };
            let kernel_w = store.require(&layer_name(l, "kernel.weight"))?;
            let shape = store.value(kernel_w).shape();
            if shape != [config.kernel, cin, config.hidden] {
                return Err(EmbedError::Config(format!(
                    "layer {l} kernel has shape {shape:?}, config expects [{}, {cin}, {}]",
                    config.kernel, config.hidden
                )));
            }
            let residual = if cin != config.hidden {
                Some(store.require(&layer_name(l, "residual.weight"))?)
            } else {
                None
            };
            let inject = (0..l.saturating_sub(1))
                .map(|j| Ok((j, store.require(&layer_name(l, &format!("inject{j}.weight")))?)))
                .collect::<Result<Vec<_>, TensorError>>()?;
            layers.push(GatedLayer {
                kernel_w,
                kernel_b: store.require(&layer_name(l, "kernel.bias"))?,
                gate_w: store.require(&layer_name(l, "gate.weight"))?,
                gate_b: store.require(&layer_name(l, "gate.bias"))?,
                residual,
                inject,
                dilation: config.dilations[l],
            });
        }
        let proj = Linear::bind(store, "encoder/proj")?;
        Ok(Self {
            config: config.clone(),
            layers,
            proj,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Encodes `x: [batch*seq_len, 14]` into `[batch*seq_len, out_dim]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, seq_len: usize) -> Result<Var, EmbedError> {
        Ok(self.forward_traced(g, x, seq_len)?.0)
    }

    /// Like [`Encoder::forward`], also returning every layer's gate activations.
    pub fn forward_traced<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, seq_len: usize) -> Result<(Var, Vec<Var>), EmbedError> {
        let cols = g.shape(x).get(1).copied().unwrap_or(0);
        if cols != NUM_POI_CATEGORIES {
            return Err(EmbedError::Shape {
                what: "encoder input channels",
                expected: NUM_POI_CATEGORIES,
                got: cols,
            });
        }
        let mut outputs: Vec<Var> = Vec::with_capacity(self.layers.len());
        let mut gates = Vec::with_capacity(self.layers.len());
        let mut e = x;
        for layer in &self.layers {
            let kw = g.param(layer.kernel_w)?;
            let kb = g.param(layer.kernel_b)?;
            let gw = g.param(layer.gate_w)?;
            let gb = g.param(layer.gate_b)?;
            let filt = g.conv1d(e, kw, Some(kb), seq_len, layer.dilation)?;
            let pre_gate = g.conv1d(e, gw, Some(gb), seq_len, layer.dilation)?;
            let gate = g.sigmoid(pre_gate)?;
            gates.push(gate);
            let gated = g.mul(filt, gate)?;
            let skip = match layer.residual {
                Some(r) => {
                    let r = g.param(r)?;
                    g.matmul(e, r)?
                }
                None => e,
            };
            let psi = g.add(gated, skip)?;
            outputs.push(psi);
            e = psi;
            // Prepare the next layer's input: this output plus projected earlier ones.
            if let Some(next) = self.layers.get(outputs.len()) {
                for &(j, w) in &next.inject {
                    let w = g.param(w)?;
                    let injected = g.matmul(outputs[j], w)?;
                    e = g.add(e, injected)?;
                }
            }
        }
        let out = self.proj.forward(g, e)?;
        Ok((out, gates))
    }
}

/// Feed-forward map from latents to the regions of one city.
#[derive(Clone, Debug)]
pub struct CityDecoder {
    pub city_id: String,
    pub num_regions: usize,
    store: ParamStore<f32>,
    head: DecoderHead,
}

#[derive(Clone, Copy, Debug)]
struct DecoderHead {
    hidden: Linear,
    out: Linear,
}

fn decoder_prefix(city: &str) -> String {
    format!("decoder/{city}/")
}

impl DecoderHead {
    fn init<T: Real>(store: &mut ParamStore<T>, city: &str, latent: usize, hidden: usize, regions: usize, seeds: &mut SeedStream) -> Result<Self, EmbedError> {
        let p = decoder_prefix(city);
        Ok(Self {
            hidden: Linear::new(store, &format!("{p}hidden"), latent, hidden, seeds)?,
            out: Linear::new(store, &format!("{p}out"), hidden, regions, seeds)?,
        })
    }

    fn bind<T: Real>(store: &ParamStore<T>, city: &str) -> Result<Self, EmbedError> {
        let p = decoder_prefix(city);
        Ok(Self {
            hidden: Linear::bind(store, &format!("{p}hidden"))?,
            out: Linear::bind(store, &format!("{p}out"))?,
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, z: Var) -> Result<Var, EmbedError> {
        let h = self.hidden.forward(g, z)?;
        let h = g.gelu(h)?;
        Ok(self.out.forward(g, h)?)
    }
}

impl CityDecoder {
    /// Freshly initialized decoder for `num_regions` regions.
    pub fn new(city_id: &str, num_regions: usize, config: &EncoderConfig, seed: u64) -> Result<Self, EmbedError> {
        if num_regions == 0 {
            return Err(EmbedError::Config(format!("city {city_id:?} has no regions")));
        }
        let mut store = ParamStore::new();
        let head = DecoderHead::init(
            &mut store,
            city_id,
            config.out_dim,
            config.decoder_hidden,
            num_regions,
            &mut SeedStream::new(seed),
        )?;
        Ok(Self {
            city_id: city_id.to_string(),
            num_regions,
            store,
            head,
        })
    }

    fn from_store(city_id: &str, store: ParamStore<f32>) -> Result<Self, EmbedError> {
        let head = DecoderHead::bind(&store, city_id)?;
        Ok(Self {
            city_id: city_id.to_string(),
            num_regions: head.out.fan_out,
            store,
            head,
        })
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn latent_dim(&self) -> usize {
        self.head.hidden.fan_in
    }

    /// Per-step region logits, `[steps, num_regions]`.
    pub fn logits(&self, rep: &UnifiedRepresentation) -> Result<Tensor<f32>, EmbedError> {
        self.logits_batch(&rep.latents)
    }

    /// Logits for any stack of latent rows `[n, dim]`.
    pub fn logits_batch(&self, latents: &Tensor<f32>) -> Result<Tensor<f32>, EmbedError> {
        if latents.cols() != self.latent_dim() {
            return Err(EmbedError::Shape {
                what: "decoder input dim",
                expected: self.latent_dim(),
                got: latents.cols(),
            });
        }
        let mut g = Graph::with_params(&self.store);
        let z = g.input(latents.clone());
        let out = self.head.forward(&mut g, z)?;
        Ok(g.value(out).clone())
    }

    /// Most likely region for every step.
    pub fn decode(&self, rep: &UnifiedRepresentation) -> Result<Vec<RegionId>, EmbedError> {
        Ok(self.logits(rep)?.argmax_rows())
    }
}

/// Display label of latents sampled by the generator rather than encoded.
pub const SYNTHETIC_SOURCE: &str = "synthetic";

/// Trained encoder plus the decoders of every known city.
#[derive(Clone, Debug)]
pub struct SpatialModel {
    config: EncoderConfig,
    encoder_store: ParamStore<f32>,
    encoder: Encoder,
    decoders: BTreeMap<String, CityDecoder>,
    /// Trajectories seen while training the encoder; sets the default adaptation budget.
    train_size: usize,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    encoder: EncoderConfig,
    cities: Vec<String>,
    train_size: usize,
}

impl SpatialModel {
    /// Untrained encoder without any decoders.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self, EmbedError> {
        let mut store = ParamStore::new();
        let encoder = Encoder::init(&mut store, &config, &mut SeedStream::new(seed))?;
        Ok(Self {
            config,
            encoder_store: store,
            encoder,
            decoders: BTreeMap::new(),
            train_size: 0,
        })
    }

    fn from_parts(config: EncoderConfig, encoder_store: ParamStore<f32>, decoders: BTreeMap<String, CityDecoder>, train_size: usize) -> Result<Self, EmbedError> {
        let encoder = Encoder::bind(&encoder_store, &config)?;
        Ok(Self {
            config,
            encoder_store,
            encoder,
            decoders,
            train_size,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn encoder_params(&self) -> &ParamStore<f32> {
        &self.encoder_store
    }

    pub fn train_size(&self) -> usize {
        self.train_size
    }

    pub fn decoder(&self, city: &str) -> Result<&CityDecoder, EmbedError> {
        self.decoders.get(city).ok_or_else(|| EmbedError::UnknownCity(city.to_string()))
    }

    pub fn cities(&self) -> impl Iterator<Item = &str> {
        self.decoders.keys().map(String::as_str)
    }

    /// Adds or replaces the decoder for `dec.city_id`.
    pub fn insert_decoder(&mut self, dec: CityDecoder) -> Result<(), EmbedError> {
        if dec.latent_dim() != self.config.out_dim {
            return Err(EmbedError::Shape {
                what: "decoder input dim",
                expected: self.config.out_dim,
                got: dec.latent_dim(),
            });
        }
        self.decoders.insert(dec.city_id.clone(), dec);
        Ok(())
    }

    /// Encodes equal-length semantic sequences in one pass.
    pub fn encode_batch(&self, seqs: &[&[PoiDistribution]]) -> Result<Vec<Tensor<f32>>, EmbedError> {
        let Some(first) = seqs.first() else {
            return Ok(Vec::new());
        };
        let len = first.len();
        if len == 0 {
            return Err(EmbedError::EmptyDataset);
        }
        if let Some(bad) = seqs.iter().find(|s| s.len() != len) {
            return Err(EmbedError::Shape {
                what: "sequence length in batch",
                expected: len,
                got: bad.len(),
            });
        }
        let x = semantics_tensor(seqs);
        let mut g = Graph::with_params(&self.encoder_store);
        let x = g.input(x);
        let z = self.encoder.forward(&mut g, x, len)?;
        let z = g.value(z);
        let d = z.cols();
        Ok((0..seqs.len())
            .map(|b| Tensor::new(vec![len, d], z.data()[b * len * d..(b + 1) * len * d].to_vec()).expect("slice has len*d values"))
            .collect())
    }

    /// Encodes one semantic sequence.
    pub fn encode(&self, seq: &[PoiDistribution], source_city: &str) -> Result<UnifiedRepresentation, EmbedError> {
        let z = self.encode_batch(&[seq])?.pop().ok_or(EmbedError::EmptyDataset)?;
        UnifiedRepresentation::new(z, source_city)
    }

    /// Encodes a trajectory through its city's region semantics.
    pub fn encode_trajectory(&self, traj: &Trajectory, map: &CityMap) -> Result<UnifiedRepresentation, EmbedError> {
        let seq = semantics_of(traj, map)?;
        self.encode(&seq, &traj.city_id)
    }

    /// Region ids for a latent sequence, using the decoder of `city`.
    pub fn decode(&self, rep: &UnifiedRepresentation, city: &str) -> Result<Vec<RegionId>, EmbedError> {
        self.decoder(city)?.decode(rep)
    }

    /// Writes encoder and decoders to `<stem>.bin`/`<stem>.json` plus `<stem>.config.json`.
    pub fn save(&self, stem: &Path) -> Result<(), EmbedError> {
        let mut all = ParamStore::new();
        let sources = std::iter::once(&self.encoder_store).chain(self.decoders.values().map(|d| &d.store));
        for store in sources {
            for p in store.iter() {
                all.add(p.name.clone(), p.value.clone())?;
            }
        }
        checkpoint::save(&all, stem)?;
        let meta = ModelMeta {
            encoder: self.config.clone(),
            cities: self.decoders.keys().cloned().collect(),
            train_size: self.train_size,
        };
        let text = serde_json::to_string_pretty(&meta).map_err(|e| EmbedError::Io(e.to_string()))?;
        std::fs::write(stem.with_extension("config.json"), text).map_err(|e| EmbedError::Io(format!("writing embedding config: {e}")))
    }

    pub fn load(stem: &Path) -> Result<Self, EmbedError> {
        let text = std::fs::read_to_string(stem.with_extension("config.json"))
            .map_err(|e| EmbedError::Io(format!("reading embedding config: {e}")))?;
        let meta: ModelMeta = serde_json::from_str(&text).map_err(|e| EmbedError::Io(format!("embedding config: {e}")))?;
        let all: ParamStore<f32> = checkpoint::load(stem)?;
        let encoder_store = subset(&all, "encoder/")?;
        let mut decoders = BTreeMap::new();
        for city in meta.cities {
            let store = subset(&all, &decoder_prefix(&city))?;
            decoders.insert(city.clone(), CityDecoder::from_store(&city, store)?);
        }
        Self::from_parts(meta.encoder, encoder_store, decoders, meta.train_size)
    }
}

/// Copies the parameters whose names start with `prefix`.
fn subset<T: Real>(store: &ParamStore<T>, prefix: &str) -> Result<ParamStore<T>, TensorError> {
    let mut out = ParamStore::new();
    for p in store.iter().filter(|p| p.name.starts_with(prefix)) {
        out.add(p.name.clone(), p.value.clone())?;
    }
    Ok(out)
}

/// Stacks sequences into `[batch*len, 14]`.
pub fn semantics_tensor<T: Real>(seqs: &[&[PoiDistribution]]) -> Tensor<T> {
    let rows = seqs.iter().map(|s| s.len()).sum::<usize>();
    let data = seqs
        .iter()
        .flat_map(|s| s.iter())
        .flat_map(|d| d.weights().iter().map(|&w| T::of(w)))
        .collect();
    Tensor::new(vec![rows, NUM_POI_CATEGORIES], data).expect("each distribution has 14 weights")
}

/// POI distribution of every stay's region.
pub fn semantics_of(traj: &Trajectory, map: &CityMap) -> Result<Vec<PoiDistribution>, EmbedError> {
    traj.stays
        .iter()
        .map(|s| map.semantics_of(s.region_id).copied().map_err(EmbedError::from))
        .collect()
}
