use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

/// Indices into the source and target partitions for one step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixedBatch {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

fn shuffled(n: usize, seed: u64, epoch: u64, role: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, &[stream::BATCH, epoch, role]));
    idx
}

/// Shuffled source batches of `half` slices covering the source set once;
/// the last batch may be shorter.
pub fn source_batches(n_source: usize, half: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if n_source == 0 {
        return Err(Error::EmptyPartition("train_labeled"));
    }
    if half == 0 {
        return Err(Error::invalid("batch", "batch size must be positive"));
    }
    Ok(shuffled(n_source, seed, epoch, 0).chunks(half).map(<[usize]>::to_vec).collect())
}

/// Iterator over one epoch of mixed batches.
#[derive(Clone, Debug)]
pub struct MixedBatchIter {
    source: std::vec::IntoIter<Vec<usize>>,
    target_order: Vec<usize>,
    cursor: usize,
}

impl Iterator for MixedBatchIter {
    type Item = MixedBatch;

    fn next(&mut self) -> Option<MixedBatch> {
        let source = self.source.next()?;
        let n = self.target_order.len();
        let target = (0..source.len()).map(|k| self.target_order[(self.cursor + k) % n]).collect();
        self.cursor = (self.cursor + source.len()) % n;
        Some(MixedBatch { source, target })
    }
}

/// Batches of `batch_size / 2` source and as many target slices. One epoch
/// is one pass over the source set; targets are drawn from a per-epoch
/// shuffle, cycling if the pool is smaller. The source order does not
/// depend on the target pool.
pub fn mixed_batch_iterator(
    n_source: usize,
    n_target: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<MixedBatchIter> {
    if batch_size == 0 || !batch_size.is_multiple_of(2) {
        return Err(Error::invalid("mixed_batch_iterator", format!("batch size {batch_size} must be even and positive")));
    }
    if n_target == 0 {
        return Err(Error::EmptyPartition("target_unlabeled"));
    }
    let source = source_batches(n_source, batch_size / 2, seed, epoch)?;
    Ok(MixedBatchIter {
        source: source.into_iter(),
        target_order: shuffled(n_target, seed, epoch, 1),
        cursor: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composition_and_coverage() {
        let batches: Vec<_> = mixed_batch_iterator(40, 25, 12, 1, 0).unwrap().collect();
        assert_eq!(batches.len(), 7);
        assert!(batches[..6].iter().all(|b| b.source.len() == 6 && b.target.len() == 6));
        assert_eq!(batches[6].source.len(), 4);
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.source.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn order_is_seeded() {
        let a: Vec<_> = mixed_batch_iterator(30, 10, 12, 5, 3).unwrap().collect();
        let b: Vec<_> = mixed_batch_iterator(30, 10, 12, 5, 3).unwrap().collect();
        let c: Vec<_> = mixed_batch_iterator(30, 10, 12, 5, 4).unwrap().collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let src: Vec<_> = source_batches(30, 6, 5, 3).unwrap();
        assert_eq!(src, a.iter().map(|m| m.source.clone()).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(mixed_batch_iterator(10, 10, 7, 0, 0).is_err());
        assert!(mixed_batch_iterator(10, 0, 12, 0, 0).is_err());
        assert!(mixed_batch_iterator(0, 10, 12, 0, 0).is_err());
    }
}
