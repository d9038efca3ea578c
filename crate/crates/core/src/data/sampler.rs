//! View-balanced round-robin ordering of training samples.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::synth::splitmix64;
use super::View;
use crate::error::{invalid, Result};

#[derive(Clone, Debug)]
pub struct BalancedSampler {
    by_view: [Vec<usize>; 3],
    seed: u64,
}

impl BalancedSampler {
    /// `views[i]` is the view of sample `i`. Every view needs a sample.
    pub fn new(views: &[View], seed: u64) -> Result<Self> {
        let mut by_view: [Vec<usize>; 3] = Default::default();
        for (i, v) in views.iter().enumerate() {
            by_view[v.index()].push(i);
        }
        if let Some(v) = View::ALL.iter().find(|v| by_view[v.index()].is_empty()) {
            return Err(invalid!("no samples for view {v}"));
        }
        Ok(Self { by_view, seed })
    }

    /// Three times the largest per-view count.
    pub fn epoch_len(&self) -> usize {
        3 * self.by_view.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Sample indices for `epoch`: coronal, left, right, coronal, ...
    /// Each view is shuffled afresh per epoch and wraps around when it has
    /// fewer samples than the largest view.
    pub fn epoch(&self, epoch: u64) -> Vec<usize> {
        let rounds = self.epoch_len() / 3;
        let orders: Vec<Vec<usize>> = self
            .by_view
            .iter()
            .enumerate()
            .map(|(v, ids)| {
                let mut ids = ids.clone();
                let key = splitmix64(self.seed ^ splitmix64(epoch.wrapping_mul(3).wrapping_add(v as u64)));
                ids.shuffle(&mut ChaCha8Rng::seed_from_u64(key));
                ids
            })
            .collect();
        (0..rounds).flat_map(|r| orders.iter().map(move |ids| ids[r % ids.len()])).collect()
    }
}

/// One epoch of the balanced stream.
pub fn balanced_batches(views: &[View], seed: u64, epoch: u64) -> Result<Vec<usize>> {
    Ok(BalancedSampler::new(views, seed)?.epoch(epoch))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn views(counts: [usize; 3]) -> Vec<View> {
        View::ALL.iter().zip(counts).flat_map(|(&v, n)| std::iter::repeat_n(v, n)).collect()
    }

    #[test]
    fn uneven_counts_wrap() {
        let v = views([4, 2, 2]);
        let order = balanced_batches(&v, 1, 0).unwrap();
        assert_eq!(order.len(), 12);
        for (i, &s) in order.iter().enumerate() {
            assert_eq!(v[s], View::ALL[i % 3]);
        }
        let mut coronal: Vec<usize> = order.iter().copied().filter(|&s| v[s] == View::Coronal).collect();
        coronal.sort_unstable();
        assert_eq!(coronal, vec![0, 1, 2, 3]);
    }

    #[test]
    fn seeded_and_epoch_dependent() {
        let v = views([5, 5, 5]);
        assert_eq!(balanced_batches(&v, 3, 2).unwrap(), balanced_batches(&v, 3, 2).unwrap());
        assert_ne!(balanced_batches(&v, 3, 2).unwrap(), balanced_batches(&v, 3, 3).unwrap());
        assert!(balanced_batches(&views([2, 0, 1]), 0, 0).is_err());
    }
}
