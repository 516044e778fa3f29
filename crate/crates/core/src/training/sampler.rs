use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TrainError;
use crate::model::Source;

/// Endless stream of source-balanced batches of row indices.
///
/// Every batch holds `⌊B/2⌋` rows from one source and `⌈B/2⌉` from the other; for odd `B` the
/// extra row goes to promotions on even batch indices and to ads on odd ones. The larger pool is
/// walked through successive seeded permutations. The smaller pool is drawn uniformly with
/// replacement so both sources stay at parity however unequal the pools are.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    promo: Vec<usize>,
    ad: Vec<usize>,
    batch_size: usize,
    promo_is_larger: bool,
    order: Vec<usize>,
    cursor: usize,
    index: u64,
    rng: ChaCha8Rng,
}

impl BalancedSampler {
    pub fn new(promo: Vec<usize>, ad: Vec<usize>, batch_size: usize, seed: u64) -> Result<Self, TrainError> {
        if batch_size < 2 {
            return Err(TrainError::BatchSize(batch_size));
        }
        for (pool, s) in [(&promo, Source::Promotion), (&ad, Source::Ad)] {
            if pool.is_empty() {
                return Err(TrainError::EmptyPool(s));
            }
        }
        let promo_is_larger = promo.len() >= ad.len();
        let mut s = Self {
            promo,
            ad,
            batch_size,
            promo_is_larger,
            order: Vec::new(),
            cursor: 0,
            index: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.reshuffle();
        Ok(s)
    }

    fn large(&self) -> &[usize] {
        if self.promo_is_larger {
            &self.promo
        } else {
            &self.ad
        }
    }

    fn small(&self) -> &[usize] {
        if self.promo_is_larger {
            &self.ad
        } else {
            &self.promo
        }
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.large().len()).collect();
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    /// Batches needed to pass once over the larger pool.
    pub fn batches_per_epoch(&self) -> usize {
        self.large().len().div_ceil(self.batch_size / 2)
    }

    /// Promotion and ad row counts of batch `index`.
    pub fn split_for(batch_size: usize, index: u64) -> (usize, usize) {
        let (lo, hi) = (batch_size / 2, batch_size - batch_size / 2);
        if index % 2 == 0 {
            (hi, lo)
        } else {
            (lo, hi)
        }
    }

    /// Row indices of the next batch, promotion rows first.
    pub fn next_batch(&mut self) -> Vec<usize> {
        let (n_promo, n_ad) = Self::split_for(self.batch_size, self.index);
        self.index += 1;
        let (n_large, n_small) = if self.promo_is_larger {
            (n_promo, n_ad)
        } else {
            (n_ad, n_promo)
        };
        let mut large = Vec::with_capacity(n_large);
        while large.len() < n_large {
            if self.cursor == self.order.len() {
                self.reshuffle();
            }
            large.push(self.large()[self.order[self.cursor]]);
            self.cursor += 1;
        }
        let small: Vec<usize> = (0..n_small)
            .map(|_| {
                let k = self.rng.random_range(0..self.small().len());
                self.small()[k]
            })
            .collect();
        if self.promo_is_larger {
            large.extend(small);
            large
        } else {
            let mut out = small;
            out.extend(large);
            out
        }
    }
}

impl Iterator for BalancedSampler {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        Some(self.next_batch())
    }
}

/// One epoch over a single pool: a seeded shuffle cut into batches of `batch_size`. A trailing
/// batch of a single row is dropped since batch statistics need two rows.
pub fn pooled_batches(rows: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>, TrainError> {
    if batch_size < 2 {
        return Err(TrainError::BatchSize(batch_size));
    }
    if rows.len() < 2 {
        return Err(TrainError::Config(format!(
            "need at least 2 training rows, have {}",
            rows.len()
        )));
    }
    let mut order = rows.to_vec();
    order.shuffle(rng);
    Ok(order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect())
}
