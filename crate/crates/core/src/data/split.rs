use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, DataResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> DataResult<Self> {
        Split::ALL
            .into_iter()
            .find(|split| split.name() == s)
            .ok_or_else(|| DataError::Argument(format!("unknown split {s:?}; expected train, val or test")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PatchRef {
    pub site: String,
    pub patch: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.6, val: 0.1, test: 0.3 }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> DataResult<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(DataError::Argument(format!("split ratios must lie in [0, 1], got {self:?}")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::Argument(format!("split ratios must sum to 1, got {sum}")));
        }
        Ok(())
    }
}

/// Site-level partition and the resulting patch lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: SplitRatios,
    pub sites: BTreeMap<String, Split>,
    pub train: Vec<PatchRef>,
    pub val: Vec<PatchRef>,
    pub test: Vec<PatchRef>,
}

impl SplitManifest {
    pub fn patches(&self, split: Split) -> &[PatchRef] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn sites_in(&self, split: Split) -> Vec<&str> {
        self.sites.iter().filter(|(_, &s)| s == split).map(|(k, _)| k.as_str()).collect()
    }
}

/// Randomly assigns whole sites to train/val/test. Val and test sizes are
/// the rounded ratio shares of the site count; train takes the remainder.
/// The result depends only on the sorted site ids and `seed`.
pub fn make_split_manifest(
    sites: &BTreeMap<String, Vec<String>>,
    ratios: SplitRatios,
    seed: u64,
) -> DataResult<SplitManifest> {
    ratios.validate()?;
    let n = sites.len();
    if n < 3 {
        return Err(DataError::Argument(format!("need at least 3 sites to split, got {n}")));
    }
    let n_val = (ratios.val * n as f64).round() as usize;
    let n_test = (ratios.test * n as f64).round() as usize;
    if n_val + n_test > n {
        return Err(DataError::Argument(format!("ratios {ratios:?} over-allocate {n} sites")));
    }
    let mut order: Vec<&String> = sites.keys().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n - n_val - n_test;

    let mut assignment = BTreeMap::new();
    for (i, site) in order.into_iter().enumerate() {
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        assignment.insert(site.clone(), split);
    }
    let mut lists: BTreeMap<Split, Vec<PatchRef>> = BTreeMap::new();
    for (site, patches) in sites {
        let list = lists.entry(assignment[site]).or_default();
        list.extend(patches.iter().map(|p| PatchRef { site: site.clone(), patch: p.clone() }));
    }
    let mut take = |s| lists.remove(&s).unwrap_or_default();
    Ok(SplitManifest {
        seed,
        ratios,
        sites: assignment,
        train: take(Split::Train),
        val: take(Split::Val),
        test: take(Split::Test),
    })
}
