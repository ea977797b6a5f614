use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream ids, one per consumer, so draws in one subsystem never shift another.
pub mod streams {
    pub const WORLD: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const SHIFT: u64 = 3;
    pub const KMEANS: u64 = 4;
    pub const SINKHORN: u64 = 5;
    pub const AUGMENT: u64 = 6;
    pub const INIT: u64 = 7;
    pub const BATCH: u64 = 8;
    pub const PROPOSALS: u64 = 9;
}

/// Seeded, counter-based generator (ChaCha8) with an explicit stream id.
///
/// Output depends only on `(seed, stream)` and the call sequence, never on the platform.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Independent child generator keyed by `key` (same stream, derived seed).
    pub fn fork(&self, key: u64) -> Rng {
        Rng::new(
            splitmix64(self.seed ^ splitmix64(key.wrapping_add(0x9e37_79b9))),
            self.stream,
        )
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n as u64) as usize
    }

    /// Inclusive integer range.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.below(hi - lo + 1)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Fisher–Yates over 64-bit draws.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream_replays() {
        let mut a = Rng::new(42, streams::WORLD);
        let mut b = Rng::new(42, streams::WORLD);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        assert_eq!(a.normal().to_bits(), b.normal().to_bits());
    }

    #[test]
    fn streams_and_forks_differ() {
        let mut a = Rng::new(42, streams::WORLD);
        let mut b = Rng::new(42, streams::KMEANS);
        assert_ne!(a.next_u64(), b.next_u64());
        let root = Rng::new(1, streams::WORLD);
        assert_ne!(root.fork(0).next_u64(), root.fork(1).next_u64());
        assert_eq!(root.fork(3).next_u64(), root.fork(3).next_u64());
    }

    #[test]
    fn pinned_first_draw() {
        // Guards cross-version / cross-platform reproducibility of stored worlds.
        let mut r = Rng::new(7, streams::WORLD);
        assert_eq!(r.next_u64(), 0xfdfa_d737_a8d7_aac7);
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut r = Rng::new(3, streams::SPLIT);
        let mut v: Vec<usize> = (0..50).collect();
        r.shuffle(&mut v);
        let mut s = v.clone();
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
        assert_ne!(v, s);
    }
}
