use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::PairDataset;
use crate::error::{Error, Result};

const MAX_RESAMPLES: usize = 10_000;

/// Emits exactly `n_batches` batches of pair indices. Each epoch is a fresh
/// shuffle seeded with `seed + epoch`; the tail of an epoch that cannot fill
/// a whole batch is dropped. A-side texts are unique within a batch:
/// duplicates are replaced by uniformly resampled pairs.
#[derive(Debug)]
pub struct BatchIter<'a> {
    ds: &'a PairDataset,
    batch_size: usize,
    remaining: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
    resample_rng: ChaCha8Rng,
    collisions: usize,
}

impl<'a> BatchIter<'a> {
    pub fn new(ds: &'a PairDataset, batch_size: usize, n_batches: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if batch_size > ds.len() {
            return Err(Error::InsufficientData(format!(
                "batch size {batch_size} exceeds dataset size {}",
                ds.len()
            )));
        }
        let distinct: HashSet<&str> = ds.pairs().iter().map(|(a, _)| a.as_str()).collect();
        if distinct.len() < batch_size {
            return Err(Error::InsufficientData(format!(
                "only {} distinct A-side sentences for batch size {batch_size}",
                distinct.len()
            )));
        }
        let mut it = BatchIter {
            ds,
            batch_size,
            remaining: n_batches,
            seed,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
            resample_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995_9e37_79b9),
            collisions: 0,
        };
        it.shuffle();
        Ok(it)
    }

    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(self.epoch));
        self.order = (0..self.ds.len()).collect();
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.ds.len() / self.batch_size
    }

    /// Duplicates replaced so far.
    pub fn collisions(&self) -> usize {
        self.collisions
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    fn dedupe(&mut self, batch: &mut [usize]) {
        let pairs = self.ds.pairs();
        let mut seen: HashSet<&str> = HashSet::with_capacity(batch.len());
        for slot in batch.iter_mut() {
            if seen.insert(pairs[*slot].0.as_str()) {
                continue;
            }
            self.collisions += 1;
            let mut replacement = None;
            for _ in 0..MAX_RESAMPLES {
                let cand = self.resample_rng.gen_range(0..pairs.len());
                if !seen.contains(pairs[cand].0.as_str()) {
                    replacement = Some(cand);
                    break;
                }
            }
            let cand = replacement.unwrap_or_else(|| {
                (0..pairs.len())
                    .find(|&i| !seen.contains(pairs[i].0.as_str()))
                    .expect("enough distinct sentences checked at construction")
            });
            seen.insert(pairs[cand].0.as_str());
            *slot = cand;
        }
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.remaining == 0 {
            return None;
        }
        if self.cursor + self.batch_size > self.order.len() {
            self.epoch += 1;
            self.shuffle();
        }
        let mut batch = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        self.remaining -= 1;
        let before = self.collisions;
        self.dedupe(&mut batch);
        if self.collisions > before {
            log::debug!("batch resampled {} duplicate A-side texts", self.collisions - before);
        }
        Some(batch)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}
