use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Trajectory, TrajectoryError};

/// Disjoint 80/10/10 partition of a trajectory set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<Trajectory>,
    pub val: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
    pub seed: u64,
}

pub fn split_dataset(trajs: &[Trajectory], seed: u64) -> Result<DatasetSplit, TrajectoryError> {
    let n = trajs.len();
    if n < 10 {
        return Err(TrajectoryError::TooFew { needed: 10, got: n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (n as f64 * 0.8).round() as usize;
    let n_val = (n as f64 * 0.1).round() as usize;
    let pick = |range: &[usize]| range.iter().map(|&i| trajs[i].clone()).collect();
    Ok(DatasetSplit {
        train: pick(&idx[..n_train]),
        val: pick(&idx[n_train..n_train + n_val]),
        test: pick(&idx[n_train + n_val..]),
        seed,
    })
}
