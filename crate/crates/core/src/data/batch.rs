use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, DataResult, PatchRef, SamplePair, SplitManifest};
use crate::tensor::Tensor;

/// Stacked samples: images `[N, 3, H, W]`, masks `[N, 1, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub a: Tensor<f32>,
    pub b: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub ids: Vec<PatchRef>,
}

impl Batch {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a SamplePair>) -> DataResult<Self> {
        let samples: Vec<&SamplePair> = samples.into_iter().collect();
        let stack = |f: &dyn Fn(&SamplePair) -> Tensor<f32>| {
            Tensor::stack(&samples.iter().map(|s| f(s)).collect::<Vec<_>>())
                .map_err(|e| DataError::Argument(format!("cannot batch samples: {e}")))
        };
        let mask = stack(&|s| {
            let mut shape = vec![1];
            shape.extend_from_slice(s.mask.shape());
            s.mask.clone().reshape(shape).expect("adding a unit axis")
        })?;
        Ok(Self {
            a: stack(&|s| s.image_a.clone())?,
            b: stack(&|s| s.image_b.clone())?,
            mask,
            ids: samples.iter().map(|s| PatchRef { site: s.site_id.clone(), patch: s.patch_id.clone() }).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Epoch-wise batching of one split. Each epoch is a seed-determined
/// permutation (or manifest order without shuffling); the last batch of an
/// epoch may be short.
#[derive(Debug, Clone)]
pub struct BatchIterator {
    ids: Vec<PatchRef>,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchIterator {
    pub fn new(manifest: &SplitManifest, split: &str, batch_size: usize, shuffle: bool, seed: u64) -> DataResult<Self> {
        let ids = manifest.patches(split.parse()?).to_vec();
        Self::from_ids(ids, batch_size, shuffle, seed)
    }

    pub fn from_ids(ids: Vec<PatchRef>, batch_size: usize, shuffle: bool, seed: u64) -> DataResult<Self> {
        if ids.is_empty() {
            return Err(DataError::Argument("cannot batch an empty split".into()));
        }
        if batch_size == 0 {
            return Err(DataError::Argument("batch_size must be positive".into()));
        }
        let mut it = Self { ids, batch_size, shuffle, seed, epoch: 0, order: Vec::new(), pos: 0 };
        it.order = it.permutation(0);
        Ok(it)
    }

    fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.ids.len()).collect();
        if self.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(epoch);
            order.shuffle(&mut rng);
        }
        order
    }

    /// All batches of epoch `epoch`.
    pub fn epoch(&self, epoch: u64) -> Vec<Vec<PatchRef>> {
        self.permutation(epoch)
            .chunks(self.batch_size)
            .map(|c| c.iter().map(|&i| self.ids[i].clone()).collect())
            .collect()
    }

    pub fn current_epoch(&self) -> u64 {
        self.epoch
    }

    /// Next batch, rolling over into a freshly permuted epoch when the
    /// current one is exhausted.
    pub fn next_batch(&mut self) -> Vec<PatchRef> {
        if self.pos >= self.order.len() {
            self.epoch += 1;
            self.order = self.permutation(self.epoch);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].iter().map(|&i| self.ids[i].clone()).collect();
        self.pos = end;
        batch
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<PatchRef> {
        (0..n).map(|i| PatchRef { site: format!("s{i}"), patch: "p".into() }).collect()
    }

    #[test]
    fn ten_by_four_gives_4_4_2() {
        let it = BatchIterator::from_ids(ids(10), 4, true, 3).unwrap();
        let sizes: Vec<_> = it.epoch(0).iter().map(Vec::len).collect();
        assert_eq!(sizes, [4, 4, 2]);
    }

    #[test]
    fn each_epoch_covers_every_id_once() {
        let it = BatchIterator::from_ids(ids(13), 5, true, 8).unwrap();
        for e in 0..3 {
            let mut seen: Vec<_> = it.epoch(e).into_iter().flatten().collect();
            seen.sort();
            let mut all = ids(13);
            all.sort();
            assert_eq!(seen, all);
        }
        assert_ne!(it.epoch(0), it.epoch(1));
    }

    #[test]
    fn seeded_order_and_rollover() {
        let mut a = BatchIterator::from_ids(ids(7), 3, true, 42).unwrap();
        let mut b = BatchIterator::from_ids(ids(7), 3, true, 42).unwrap();
        let first: Vec<_> = (0..3).map(|_| a.next_batch()).collect();
        assert_eq!(first, a.epoch(0));
        assert_eq!(a.next_batch(), a.epoch(1)[0]);
        assert_eq!(a.current_epoch(), 1);
        for _ in 0..4 {
            b.next_batch();
        }
        assert_eq!(a.next_batch(), b.next_batch());
        let plain = BatchIterator::from_ids(ids(5), 2, false, 0).unwrap();
        assert_eq!(plain.epoch(0).concat(), ids(5));
    }

    #[test]
    fn unknown_split_is_an_argument_error() {
        let manifest = SplitManifest {
            seed: 0,
            ratios: Default::default(),
            sites: Default::default(),
            train: ids(2),
            val: vec![],
            test: vec![],
        };
        assert!(matches!(BatchIterator::new(&manifest, "holdout", 2, false, 0), Err(DataError::Argument(_))));
        assert!(BatchIterator::new(&manifest, "train", 2, false, 0).is_ok());
        assert!(BatchIterator::new(&manifest, "val", 2, false, 0).is_err());
    }
}
