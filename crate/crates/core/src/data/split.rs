use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const VAL_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Self::Train),
            "val" | "valid" | "validation" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn all(&self) -> Vec<String> {
        self.train.iter().chain(&self.val).chain(&self.test).cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(id) {
                return Err(Error::Data(format!("id {id} appears in more than one split")));
            }
        }
        Ok(())
    }
}

/// Moves `⌊0.2·|train|⌋` ids, chosen by a seeded shuffle, into `val` unless
/// `val` is already populated. The remaining train ids keep their order.
pub fn carve_validation(mut split: DatasetSplit) -> DatasetSplit {
    if !split.val.is_empty() {
        return split;
    }
    let k = (split.train.len() as f64 * VAL_FRACTION).floor() as usize;
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(split.seed));
    let mut chosen = vec![false; split.train.len()];
    for &i in &order[..k] {
        chosen[i] = true;
    }
    split.val = order[..k].iter().map(|&i| split.train[i].clone()).collect();
    split.train = split
        .train
        .iter()
        .zip(&chosen)
        .filter(|(_, &c)| !c)
        .map(|(id, _)| id.clone())
        .collect();
    split
}
