//! Epoch sampling with a one-step lookahead.
//!
//! Every epoch is a seeded shuffle partitioned into ceil(N/n) batches, the
//! final short batch kept. The lookahead of batch `t` is batch `t+1`; at an
//! epoch boundary it crosses into the next epoch's first batch, and only the
//! very last step of a run has no lookahead. Sibling channels consume exactly
//! this lookahead sequence, one batch ahead of the gradient channel.

use crate::rng::{self, DOMAIN_SHUFFLE};

use super::DataError;

#[derive(Debug, Clone)]
pub struct EpochSampler {
    n: usize,
    batch: usize,
    seed: u64,
}

impl EpochSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Result<Self, DataError> {
        if batch == 0 {
            return Err(DataError::EmptyBatch);
        }
        if batch > n {
            return Err(DataError::BatchTooLarge { batch, dataset: n });
        }
        Ok(EpochSampler { n, batch, seed })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch)
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// The ordered batch index lists of one epoch.
    pub fn epoch_batches(&self, epoch: u64) -> Vec<Vec<u32>> {
        let mut order: Vec<u32> = (0..self.n as u32).collect();
        let mut stream = rng::stream(self.seed, DOMAIN_SHUFFLE, epoch, 0);
        rng::shuffle(&mut stream, &mut order);
        order.chunks(self.batch).map(<[u32]>::to_vec).collect()
    }

    /// Batch `t + 1` of the run, given position `(epoch, t)`; `None` only at
    /// the final step of the final epoch.
    pub fn lookahead(&self, epoch: u64, t: usize, total_epochs: u64) -> Option<Vec<u32>> {
        let per_epoch = self.batches_per_epoch();
        if t + 1 < per_epoch {
            Some(self.epoch_batches(epoch)[t + 1].clone())
        } else if epoch + 1 < total_epochs {
            Some(self.epoch_batches(epoch + 1)[0].clone())
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_over_four_gives_two_batches() {
        let s = EpochSampler::new(8, 4, 1).unwrap();
        let batches = s.epoch_batches(0);
        assert_eq!(batches.len(), 2);
        assert_eq!(s.lookahead(0, 0, 1).unwrap(), batches[1]);
    }

    #[test]
    fn remainder_batch_is_kept() {
        let s = EpochSampler::new(10, 4, 1).unwrap();
        let sizes: Vec<usize> = s.epoch_batches(0).iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn same_seed_and_epoch_reproduce_batches() {
        let s = EpochSampler::new(100, 16, 7).unwrap();
        assert_eq!(s.epoch_batches(3), s.epoch_batches(3));
        assert_ne!(s.epoch_batches(3), s.epoch_batches(4));
    }

    #[test]
    fn epochs_partition_all_indices() {
        let s = EpochSampler::new(10, 4, 2).unwrap();
        let mut seen: Vec<u32> = s.epoch_batches(5).concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn lookahead_crosses_epoch_boundary_and_ends_empty() {
        let s = EpochSampler::new(8, 4, 3).unwrap();
        let next = s.lookahead(0, 1, 2).unwrap();
        assert_eq!(next, s.epoch_batches(1)[0]);
        assert_eq!(s.lookahead(1, 1, 2), None);
    }

    #[test]
    fn batch_larger_than_dataset_rejected() {
        assert!(matches!(
            EpochSampler::new(4, 5, 0),
            Err(DataError::BatchTooLarge {
                batch: 5,
                dataset: 4
            })
        ));
    }
}
