//! Linear-beta noise schedule, forward noising and the reverse posterior.

use mobiforge_autodiff::{Real, Tensor};
use serde::{Deserialize, Serialize};

use super::GenError;

/// How to build a schedule: the base linear betas plus optional respacing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Keep only this many evenly spaced steps of the base schedule.
    pub respace_to: Option<usize>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 0.001,
            beta_end: 0.1,
            respace_to: None,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule, GenError> {
        let base = build_schedule(self.steps, self.beta_start, self.beta_end)?;
        match self.respace_to {
            Some(n) => base.respace(n),
            None => Ok(base),
        }
    }
}

/// Betas and cumulative signal levels for steps `t = 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linear betas from `beta_start` (t = 1) to `beta_end` (t = T).
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule, GenError> {
    if steps < 2 {
        return Err(GenError::Schedule(format!("need at least 2 steps, got {steps}")));
    }
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(GenError::Schedule(format!(
            "need 0 < beta_start < beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let betas = (0..steps)
        .map(|i| beta_start + i as f64 / (steps - 1) as f64 * (beta_end - beta_start))
        .collect();
    DiffusionSchedule::from_betas(betas)
}

impl DiffusionSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self, GenError> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(GenError::Schedule("betas must lie in (0, 1)".into()));
        }
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `β_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Shorter schedule visiting steps `⌈i·T/n⌉`, `i = 1..=n`, of this one.
    ///
    /// Signal levels at the kept steps are unchanged; the betas are whatever
    /// produces them, `β'_i = 1 − ᾱ'_i / ᾱ'_{i−1}`.
    pub fn respace(&self, n: usize) -> Result<Self, GenError> {
        let t = self.steps();
        if n < 2 || n > t {
            return Err(GenError::Schedule(format!("cannot respace {t} steps to {n}")));
        }
        let kept: Vec<f64> = (1..=n).map(|i| self.alpha_bar((i * t).div_ceil(n))).collect();
        let mut prev = 1.0;
        let betas = kept
            .iter()
            .map(|&ab| {
                let b = 1.0 - ab / prev;
                prev = ab;
                b
            })
            .collect();
        Self::from_betas(betas)
    }

    fn check_t(&self, t: usize) -> Result<(), GenError> {
        if t == 0 || t > self.steps() {
            return Err(GenError::Schedule(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// `x_t = sqrt(ᾱ_t)·x0 + sqrt(1 − ᾱ_t)·ε`.
    pub fn forward_noise<T: Real>(&self, x0: &Tensor<T>, t: usize, noise: &Tensor<T>) -> Result<Tensor<T>, GenError> {
        self.check_t(t)?;
        if x0.shape() != noise.shape() {
            return Err(GenError::Shape(format!("x0 {:?} vs noise {:?}", x0.shape(), noise.shape())));
        }
        let ab = self.alpha_bar(t);
        let (a, b) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
        let data = x0.data().iter().zip(noise.data()).map(|(&x, &e)| a * x + b * e).collect();
        Ok(Tensor::new(x0.shape().to_vec(), data)?)
    }

    /// Coefficients of `μ_t = c_x0·x̂0 + c_xt·x_t` and the variance `σ_t²`.
    pub fn posterior(&self, t: usize) -> Posterior {
        let (ab, ab_prev, beta) = (self.alpha_bar(t), self.alpha_bar(t - 1), self.beta(t));
        Posterior {
            coef_x0: ab_prev.sqrt() * beta / (1.0 - ab),
            coef_xt: self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab),
            variance: beta * (1.0 - ab_prev) / (1.0 - ab),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Posterior {
    pub coef_x0: f64,
    pub coef_xt: f64,
    pub variance: f64,
}
