//! Conditional diffusion transformer predicting clean latents.

use mobiforge_autodiff::{Graph, Linear, ParamStore, Real, SeedStream, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::GenError;
use crate::geo::NUM_POI_CATEGORIES;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiTConfig {
    pub blocks: usize,
    pub heads: usize,
    pub d_model: usize,
    pub ffn: usize,
}

impl Default for DiTConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            heads: 8,
            d_model: 128,
            ffn: 2048,
        }
    }
}

impl DiTConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        if self.blocks == 0 || self.heads == 0 || self.d_model == 0 || self.ffn == 0 {
            return Err(GenError::Config(format!("all DiT sizes must be positive: {self:?}")));
        }
        if self.d_model % self.heads != 0 {
            return Err(GenError::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(GenError::Config("d_model must be even for sinusoidal embeddings".into()));
        }
        Ok(())
    }
}

/// Condition tensors for a batch of `batch` sequences of `len` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBatch<T> {
    /// POI distribution of each start region, `[batch, 14]`.
    pub start: Tensor<T>,
    /// Per-step slot distributions, `[batch*len, slots_per_day]`.
    pub temporal: Tensor<T>,
    /// Per-step destination semantics, `[batch*len, 14]`.
    pub semantic: Tensor<T>,
    pub batch: usize,
    pub len: usize,
}

/// Sinusoidal features of integer positions, `[positions.len(), dim]`.
pub fn sinusoidal<T: Real>(positions: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn(vec![positions.len(), dim], |i| {
        let (p, j) = (positions[i / dim] as f64, i % dim);
        let freq = (-(10_000f64.ln()) * (j % half) as f64 / half as f64).exp();
        T::of(if j < half { (p * freq).sin() } else { (p * freq).cos() })
    })
}

#[derive(Clone, Copy, Debug)]
struct Projection {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Projection {
    fn init<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, seeds: &mut SeedStream) -> Result<Self, GenError> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, seeds)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, seeds)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, seeds)?,
            o: Linear::new(store, &format!("{name}.o"), d, d, seeds)?,
        })
    }

    fn bind<T: Real>(store: &ParamStore<T>, name: &str) -> Result<Self, GenError> {
        Ok(Self {
            q: Linear::bind(store, &format!("{name}.q"))?,
            k: Linear::bind(store, &format!("{name}.k"))?,
            v: Linear::bind(store, &format!("{name}.v"))?,
            o: Linear::bind(store, &format!("{name}.o"))?,
        })
    }

    fn attend<T: Real>(&self, g: &mut Graph<'_, T>, query: Var, context: Var, heads: usize, batch: usize) -> Result<Var, GenError> {
        let q = self.q.forward(g, query)?;
        let k = self.k.forward(g, context)?;
        let v = self.v.forward(g, context)?;
        let a = g.multi_head_attention(q, k, v, heads, batch, None)?;
        Ok(self.o.forward(g, a)?)
    }
}

#[derive(Clone, Copy, Debug)]
struct Block {
    modulation: Linear,
    self_attn: Projection,
    cross_attn: Projection,
    ffn_in: Linear,
    ffn_out: Linear,
}

/// Scale, shift and gate vectors of one block, each `[batch, d_model]`.
#[derive(Clone, Copy, Debug)]
pub struct Modulation {
    pub gamma1: Var,
    pub beta1: Var,
    pub alpha1: Var,
    pub gamma2: Var,
    pub beta2: Var,
    pub alpha2: Var,
}

/// Parameter handles of the denoiser inside a store.
#[derive(Clone, Debug)]
pub struct Dit {
    config: DiTConfig,
    latent_dim: usize,
    slots_per_day: usize,
    input: Linear,
    time1: Linear,
    time2: Linear,
    start: Linear,
    temporal: Linear,
    semantic: Linear,
    blocks: Vec<Block>,
    head: Linear,
}

fn block_name(i: usize, part: &str) -> String {
    format!("generator/block{i}/{part}")
}

impl Dit {
    /// Adds fresh parameters to `store`. Modulation layers and the output head
    /// start at zero, so every block begins as identity on its gated paths and the
    /// untrained model predicts `x̂0 = 0`.
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        config: DiTConfig,
        latent_dim: usize,
        slots_per_day: usize,
        seeds: &mut SeedStream,
    ) -> Result<Self, GenError> {
        config.validate()?;
        let d = config.d_model;
        Linear::new(store, "generator/input", latent_dim, d, seeds)?;
        Linear::new(store, "generator/time1", d, d, seeds)?;
        Linear::new(store, "generator/time2", d, d, seeds)?;
        Linear::new(store, "generator/start", NUM_POI_CATEGORIES, d, seeds)?;
        Linear::new(store, "generator/temporal", slots_per_day, d, seeds)?;
        Linear::new(store, "generator/semantic", NUM_POI_CATEGORIES, d, seeds)?;
        for i in 0..config.blocks {
            Linear::zeros(store, &block_name(i, "modulation"), d, 6 * d)?;
            Projection::init(store, &block_name(i, "self_attn"), d, seeds)?;
            Projection::init(store, &block_name(i, "cross_attn"), d, seeds)?;
            Linear::new(store, &block_name(i, "ffn_in"), d, config.ffn, seeds)?;
            Linear::new(store, &block_name(i, "ffn_out"), config.ffn, d, seeds)?;
        }
        Linear::zeros(store, "generator/head", d, latent_dim)?;
        Self::bind(store, config)
    }

    pub fn bind<T: Real>(store: &ParamStore<T>, config: DiTConfig) -> Result<Self, GenError> {
        config.validate()?;
        let input = Linear::bind(store, "generator/input")?;
        let temporal = Linear::bind(store, "generator/temporal")?;
        let blocks = (0..config.blocks)
            .map(|i| {
                Ok(Block {
                    modulation: Linear::bind(store, &block_name(i, "modulation"))?,
                    self_attn: Projection::bind(store, &block_name(i, "self_attn"))?,
                    cross_attn: Projection::bind(store, &block_name(i, "cross_attn"))?,
                    ffn_in: Linear::bind(store, &block_name(i, "ffn_in"))?,
                    ffn_out: Linear::bind(store, &block_name(i, "ffn_out"))?,
                })
            })
            .collect::<Result<Vec<_>, GenError>>()?;
        if input.fan_out != config.d_model {
            return Err(GenError::Config(format!(
                "stored d_model {} differs from configured {}",
                input.fan_out, config.d_model
            )));
        }
        Ok(Self {
            config,
            latent_dim: input.fan_in,
            slots_per_day: temporal.fan_in,
            input,
            time1: Linear::bind(store, "generator/time1")?,
            time2: Linear::bind(store, "generator/time2")?,
            start: Linear::bind(store, "generator/start")?,
            temporal,
            semantic: Linear::bind(store, "generator/semantic")?,
            blocks,
            head: Linear::bind(store, "generator/head")?,
        })
    }

    pub fn config(&self) -> DiTConfig {
        self.config
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn slots_per_day(&self) -> usize {
        self.slots_per_day
    }

    /// Embedded conditions: `(r0′, memory per step, D′ per step, t′)`, where the
    /// cross-attention memory is `M′ + D′ +` step positions.
    fn embed_conditions<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        t: &[usize],
        cond: &ConditionBatch<T>,
    ) -> Result<(Var, Var, Var, Var), GenError> {
        let d = self.config.d_model;
        let start = g.input(cond.start.clone());
        let r0 = self.start.forward(g, start)?;
        let temporal = g.input(cond.temporal.clone());
        let m = self.temporal.forward(g, temporal)?;
        let positions: Vec<usize> = (0..cond.batch).flat_map(|_| 0..cond.len).collect();
        let pos = g.input(sinusoidal(&positions, d));
        let m = g.add(m, pos)?;
        let semantic = g.input(cond.semantic.clone());
        let dd = self.semantic.forward(g, semantic)?;
        let m = g.add(m, dd)?;
        let tf = g.input(sinusoidal(t, d));
        let t1 = self.time1.forward(g, tf)?;
        let t1 = g.gelu(t1)?;
        let te = self.time2.forward(g, t1)?;
        Ok((r0, m, dd, te))
    }

    /// Modulation vectors of block `i` from embedded, pooled conditions (`[batch, d]` each).
    pub fn modulation<T: Real>(&self, g: &mut Graph<'_, T>, i: usize, r0: Var, m: Var, d_sem: Var, t: Var) -> Result<Modulation, GenError> {
        let block = self.blocks.get(i).ok_or_else(|| GenError::Config(format!("no block {i}")))?;
        let s = g.add(r0, m)?;
        let s = g.add(s, d_sem)?;
        let s = g.add(s, t)?;
        let h = g.gelu(s)?;
        let out = block.modulation.forward(g, h)?;
        let d = self.config.d_model;
        let mut parts = [out; 6];
        for (k, p) in parts.iter_mut().enumerate() {
            *p = g.slice_cols(out, k * d, d)?;
        }
        let [gamma1, beta1, alpha1, gamma2, beta2, alpha2] = parts;
        Ok(Modulation {
            gamma1,
            beta1,
            alpha1,
            gamma2,
            beta2,
            alpha2,
        })
    }

    /// `LN(x)·(1+γ)+β` with per-sample `γ, β` broadcast over `len` steps.
    fn ada_ln<T: Real>(g: &mut Graph<'_, T>, x: Var, gamma: Var, beta: Var, len: usize) -> Result<Var, GenError> {
        let n = g.layer_norm(x, 1, LN_EPS)?;
        let gm = g.broadcast_rows(gamma, len)?;
        let gm = g.add_scalar(gm, 1.0)?;
        let bt = g.broadcast_rows(beta, len)?;
        let scaled = g.mul(n, gm)?;
        Ok(g.add(scaled, bt)?)
    }

    /// One block applied to `x: [batch*len, d]` with plan memory `m`.
    pub fn block<T: Real>(&self, g: &mut Graph<'_, T>, i: usize, x: Var, m: Var, md: &Modulation, batch: usize, len: usize) -> Result<Var, GenError> {
        let b = &self.blocks[i];
        let heads = self.config.heads;
        // Self-attention, gated by α₁.
        let h = Self::ada_ln(g, x, md.gamma1, md.beta1, len)?;
        let h = b.self_attn.attend(g, h, h, heads, batch)?;
        let a1 = g.broadcast_rows(md.alpha1, len)?;
        let h = g.mul(h, a1)?;
        let x1 = g.add(h, x)?;
        // Cross-attention to the plan memory.
        let h = g.layer_norm(x1, 1, LN_EPS)?;
        let h = b.cross_attn.attend(g, h, m, heads, batch)?;
        let x2 = g.add(h, x1)?;
        // Feed-forward, gated by α₂.
        let h = Self::ada_ln(g, x2, md.gamma2, md.beta2, len)?;
        let h = b.ffn_in.forward(g, h)?;
        let h = g.gelu(h)?;
        let h = b.ffn_out.forward(g, h)?;
        let a2 = g.broadcast_rows(md.alpha2, len)?;
        let h = g.mul(h, a2)?;
        Ok(g.add(h, x2)?)
    }

    /// Predicts clean latents `[batch*len, latent_dim]` from noisy ones at steps `t` (one per sample).
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x_t: Var, t: &[usize], cond: &ConditionBatch<T>) -> Result<Var, GenError> {
        let (batch, len) = (cond.batch, cond.len);
        let rows = batch * len;
        let check = |what: &str, got: &[usize], want: &[usize]| {
            if got == want {
                Ok(())
            } else {
                Err(GenError::Shape(format!("{what} has shape {got:?}, expected {want:?}")))
            }
        };
        check("x_t", g.shape(x_t), &[rows, self.latent_dim])?;
        check("start condition", cond.start.shape(), &[batch, NUM_POI_CATEGORIES])?;
        check("temporal plan", cond.temporal.shape(), &[rows, self.slots_per_day])?;
        check("semantic plan", cond.semantic.shape(), &[rows, NUM_POI_CATEGORIES])?;
        if t.len() != batch {
            return Err(GenError::Shape(format!("{} diffusion steps for {batch} samples", t.len())));
        }
        let (r0, m, d_steps, te) = self.embed_conditions(g, t, cond)?;
        let m_pool = g.mean_groups(m, len)?;
        let d_pool = g.mean_groups(d_steps, len)?;

        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
        let pos = g.input(sinusoidal(&positions, self.config.d_model));
        let h = self.input.forward(g, x_t)?;
        let mut x = g.add(h, pos)?;
        for i in 0..self.blocks.len() {
            let md = self.modulation(g, i, r0, m_pool, d_pool, te)?;
            x = self.block(g, i, x, m, &md, batch, len)?;
        }
        let x = g.layer_norm(x, 1, LN_EPS)?;
        Ok(self.head.forward(g, x)?)
    }
}
