//! Helpers shared by the training loops.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Loss trace of one training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mini-batch loss after every optimizer step.
    pub step_losses: Vec<f64>,
    /// Mean mini-batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn push_epoch(&mut self, first_step: usize) {
        let slice = &self.step_losses[first_step..];
        if !slice.is_empty() {
            self.epoch_losses.push(slice.iter().sum::<f64>() / slice.len() as f64);
        }
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// Trailing moving average with window `w`; element `i` averages `xs[i+1-w..=i]`.
pub fn moving_average(xs: &[f64], w: usize) -> Vec<f64> {
    if w == 0 || xs.len() < w {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(xs.len() + 1 - w);
    let mut acc: f64 = xs[..w].iter().sum();
    out.push(acc / w as f64);
    for i in w..xs.len() {
        acc += xs[i] - xs[i - w];
        out.push(acc / w as f64);
    }
    out
}

/// Averages `xs` over consecutive non-overlapping windows of `w` (last partial window dropped).
pub fn block_means(xs: &[f64], w: usize) -> Vec<f64> {
    xs.chunks_exact(w.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

/// Per-epoch shuffled mini-batches of indices `0..n`, reproducible from `seed`.
pub struct Batcher {
    rng: ChaCha8Rng,
    n: usize,
    batch: usize,
}

impl Batcher {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            n,
            batch: batch.max(1),
        }
    }

    pub fn epoch(&mut self) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.n).collect();
        idx.shuffle(&mut self.rng);
        idx.chunks(self.batch).map(<[usize]>::to_vec).collect()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moving_average_windows() {
        assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.5, 2.5, 3.5]);
        assert!(moving_average(&[1.0], 2).is_empty());
        assert_eq!(block_means(&[1.0, 3.0, 5.0, 7.0, 9.0], 2), vec![2.0, 6.0]);
    }

    #[test]
    fn batches_cover_every_index_once() {
        let mut b = Batcher::new(10, 3, 1);
        let e = b.epoch();
        assert_eq!(e.len(), 4);
        let mut all: Vec<usize> = e.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(Batcher::new(10, 3, 1).epoch(), e);
    }
}
