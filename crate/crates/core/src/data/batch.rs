use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::LabeledImageSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Keeps shuffling streams clear of the ones used for initialisation.
const STREAM_BASE: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub seed: u64,
    pub batch_size: usize,
}

impl BatchPlan {
    pub fn new(seed: u64, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(BatchPlan { seed, batch_size })
    }

    /// Sample order for `epoch`; a pure function of `(seed, epoch, n)`.
    pub fn permutation(&self, epoch: u64, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(STREAM_BASE + epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    pub fn num_batches(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Lazily materialised batches of one epoch. The last batch may be short.
pub fn iterate_batches<'a, T: Scalar>(
    set: &'a LabeledImageSet<T>,
    plan: &BatchPlan,
    epoch: u64,
) -> impl Iterator<Item = Batch<T>> + 'a {
    let order = plan.permutation(epoch, set.len());
    let size = plan.batch_size.max(1);
    (0..plan.num_batches(set.len())).map(move |b| {
        let indices = order[b * size..((b + 1) * size).min(order.len())].to_vec();
        let (images, labels) = set.subset(&indices).expect("permutation indices are in range");
        Batch { images, labels, indices }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use proptest::prelude::*;

    fn set(n: usize) -> LabeledImageSet<f64> {
        let images = Tensor::new(&[n, 1, 1, 1], (0..n).map(|i| i as f64).collect()).unwrap();
        LabeledImageSet { images, labels: vec![0; n], split: Split::Train, num_classes: 1 }
    }

    #[test]
    fn short_final_batch_is_kept() {
        let plan = BatchPlan::new(1, 4).unwrap();
        let sizes: Vec<usize> = iterate_batches(&set(10), &plan, 0).map(|b| b.labels.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn order_is_reproducible_and_varies_by_epoch() {
        let plan = BatchPlan::new(7, 8).unwrap();
        let s = set(64);
        let order = |e| iterate_batches(&s, &plan, e).flat_map(|b| b.indices).collect::<Vec<_>>();
        assert_eq!(order(0), order(0));
        assert_ne!(order(0), order(1));
    }

    #[test]
    fn images_follow_indices() {
        let plan = BatchPlan::new(3, 3).unwrap();
        for b in iterate_batches(&set(7), &plan, 2) {
            let expect: Vec<f64> = b.indices.iter().map(|&i| i as f64).collect();
            assert_eq!(b.images.data(), &expect[..]);
        }
    }

    proptest! {
        #[test]
        fn epoch_covers_dataset_exactly_once(n in 1usize..200, bs in 1usize..50, seed: u64, epoch in 0u64..100) {
            let plan = BatchPlan::new(seed, bs).unwrap();
            let mut seen: Vec<usize> = iterate_batches(&set(n), &plan, epoch).flat_map(|b| b.indices).collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }
    }
}
