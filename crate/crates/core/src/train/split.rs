use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Case ids on each side of a split, each list sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    /// Samples of the training and test cases, in dataset order.
    pub fn apply(&self, data: &Dataset) -> (Dataset, Dataset) {
        (data.select_cases(&self.train), data.select_cases(&self.test))
    }
}

/// Holds out `round(fraction · cases)` whole cases (at least one on each
/// side), chosen by a seeded shuffle of the sorted unique ids.
pub fn split_dataset(cases: &[String], fraction: f64, seed: u64) -> Result<Split> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("split fraction {fraction} must lie in (0, 1)")));
    }
    let mut ids: Vec<String> = cases.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 cases to split, found {}",
            ids.len()
        )));
    }
    let n_test = ((fraction * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test = ids.split_off(ids.len() - n_test);
    ids.sort();
    test.sort();
    Ok(Split { train: ids, test })
}
