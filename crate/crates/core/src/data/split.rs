use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::FeatureBag;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}, expected train, val or test"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.6,
            val: 0.15,
            test: 0.25,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
            return Err(Error::Config(format!("split fractions must be non-negative: {parts:?}")));
        }
        let total: f64 = parts.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {total}, not 1")));
        }
        Ok(())
    }
}

/// Bag indices of each split, each list ascending.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Partition {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Partition {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Split of every bag index in `0..len`.
    pub fn assignments(&self, len: usize) -> Vec<Option<Split>> {
        let mut out = vec![None; len];
        for split in Split::ALL {
            for &i in self.get(split) {
                out[i] = Some(split);
            }
        }
        out
    }

    /// Rebuilds a partition from per-bag split labels.
    pub fn from_assignments(labels: &[Split]) -> Self {
        let mut p = Partition::default();
        for (i, s) in labels.iter().enumerate() {
            match s {
                Split::Train => p.train.push(i),
                Split::Val => p.val.push(i),
                Split::Test => p.test.push(i),
            }
        }
        p
    }

    /// SHA-256 over `split\tslide id` lines, identifying the exact partition.
    pub fn fingerprint(&self, bags: &[FeatureBag]) -> String {
        let mut h = Sha256::new();
        for split in Split::ALL {
            for &i in self.get(split) {
                h.update(split.as_str().as_bytes());
                h.update(b"\t");
                h.update(bags[i].slide_id.as_bytes());
                h.update(b"\n");
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Stratified split: within every (task, category) group the bags are
/// shuffled by `seed` and cut at rounded fractions.
pub fn split(bags: &[FeatureBag], fractions: SplitFractions, seed: u64) -> Result<Partition> {
    fractions.validate()?;
    let mut order: Vec<(usize, &str)> = Vec::new();
    let mut groups: HashMap<(usize, &str), Vec<usize>> = HashMap::new();
    for (i, bag) in bags.iter().enumerate() {
        let key = (bag.task_id, bag.label_term.as_str());
        groups
            .entry(key)
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Partition::default();
    for key in order {
        let mut members = groups.remove(&key).expect("group exists");
        let n = members.len();
        if n < 3 {
            return Err(Error::Split(format!(
                "category {:?} of task {} has {n} bags, at least 3 are needed",
                key.1, key.0
            )));
        }
        members.shuffle(&mut rng);
        let n_train = ((fractions.train * n as f64).round() as usize).min(n);
        let n_val = ((fractions.val * n as f64).round() as usize).min(n - n_train);
        p.train.extend(&members[..n_train]);
        p.val.extend(&members[n_train..n_train + n_val]);
        p.test.extend(&members[n_train + n_val..]);
    }
    p.train.sort_unstable();
    p.val.sort_unstable();
    p.test.sort_unstable();
    Ok(p)
}

/// Joins per-task datasets into one multi-task set; every bag keeps its task id.
pub fn merge<I: IntoIterator<Item = Vec<FeatureBag>>>(parts: I) -> Vec<FeatureBag> {
    parts.into_iter().flatten().collect()
}
