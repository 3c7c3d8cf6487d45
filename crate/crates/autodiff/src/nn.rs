//! Parameterized layer helpers built on [`Graph`] ops.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Deterministic stream of per-layer seeds (splitmix64).
#[derive(Clone, Debug)]
pub struct SeedStream(u64);

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self(seed)
    }

    pub fn next_seed(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

/// Fully connected layer `x · W + b`, weight stored `[fan_in, fan_out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Xavier-initialized weight, zero bias. Parameters are `{name}.weight` and `{name}.bias`.
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, seeds: &mut SeedStream) -> Result<Self> {
        let weight = store.add_xavier(format!("{name}.weight"), &[fan_in, fan_out], seeds.next_seed())?;
        let bias = Some(store.add_zeros(format!("{name}.bias"), &[fan_out])?);
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    /// All-zero weight and bias.
    pub fn zeros<T: Real>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(vec![fan_in, fan_out]))?;
        let bias = Some(store.add_zeros(format!("{name}.bias"), &[fan_out])?);
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    /// Looks up an existing layer by name.
    pub fn bind<T: Real>(store: &ParamStore<T>, name: &str) -> Result<Self> {
        let weight = store.require(&format!("{name}.weight"))?;
        let bias = store.id(&format!("{name}.bias"));
        let s = store.value(weight).shape();
        Ok(Self {
            weight,
            bias,
            fan_in: s[0],
            fan_out: s[1],
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let b = match self.bias {
            Some(b) => Some(g.param(b)?),
            None => None,
        };
        g.linear(x, w, b)
    }
}
