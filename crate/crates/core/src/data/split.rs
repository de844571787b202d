use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::contract(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

impl DatasetSplit {
    pub fn ids(&self, which: Split) -> &[u64] {
        match which {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Seeded shuffle, then contiguous train/val/test blocks. Val and test each
/// get `round(n/10)` ids (ties away from zero); train gets the remainder.
pub fn split_dataset(ids: &[u64], seed: u64) -> Result<DatasetSplit> {
    if ids.len() < 10 {
        return Err(Error::contract(format!("need at least 10 ids to split, got {}", ids.len())));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_hold = (ids.len() as f64 / 10.0).round() as usize;
    let n_train = ids.len() - 2 * n_hold;
    let test = shuffled.split_off(n_train + n_hold);
    let val = shuffled.split_off(n_train);
    Ok(DatasetSplit { train: shuffled, val, test })
}
