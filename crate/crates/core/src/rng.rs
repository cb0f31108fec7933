//! Deterministic random number streams.
//!
//! All randomness in the crate flows through [`RngStream`], a counter-based
//! generator (ChaCha8) seeded from a 64-bit value. Identical seeds produce
//! identical draw sequences on every platform, independent of thread
//! scheduling, which is what makes dataset generation and training runs
//! replayable from a manifest.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;

/// Stateless 64-bit mixer used to derive independent child seeds.
#[inline]
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// A seeded, reproducible random stream.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Derive an independent child stream from a parent seed and a stream
    /// index. Pure function of its inputs: `derive(s, i)` never depends on
    /// how many draws the parent has consumed.
    pub fn derive(parent_seed: u64, index: u64) -> Self {
        Self::new(splitmix64(parent_seed ^ splitmix64(index.wrapping_add(0xA5A5_A5A5_0F0F_0F0F))))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn standard_normal<T: Scalar>(&mut self) -> T
    where
        StandardNormal: Distribution<T>,
    {
        self.rng.sample(StandardNormal)
    }

    pub fn normal_f64(&mut self, mean: f64, sd: f64) -> f64 {
        let z: f64 = self.rng.sample(StandardNormal);
        mean + sd * z
    }

    pub fn uniform<T: Scalar>(&mut self, lo: T, hi: T) -> T {
        self.rng.gen_range(lo..hi)
    }

    pub fn uniform_f64(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.gen_range(lo..hi)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.rng.gen_bool(p)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform index in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index range must be nonempty");
        self.rng.gen_range(0..n)
    }

    /// Pick one element of a slice uniformly.
    pub fn choose<'a, V>(&mut self, items: &'a [V]) -> &'a V {
        &items[self.index(items.len())]
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

/// A half-open range `[start, end)` of dataset seeds. Train and test data
/// must come from disjoint ranges so no test dataset can ever be replayed
/// during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SeedRange {
    pub start: u64,
    pub end: u64,
}

impl SeedRange {
    pub fn new(start: u64, end: u64) -> Self {
        assert!(start < end, "seed range must be nonempty");
        Self { start, end }
    }

    pub fn len(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn contains(&self, seed: u64) -> bool {
        seed >= self.start && seed < self.end
    }

    pub fn overlaps(&self, other: &SeedRange) -> bool {
        self.start < other.end && other.start < self.end
    }

    /// The i-th seed of the range.
    pub fn seed_at(&self, index: u64) -> Option<u64> {
        if index < self.len() {
            Some(self.start + index)
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = RngStream::new(42);
        let mut b = RngStream::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut a = RngStream::new(42);
        let mut b = RngStream::new(42);
        for _ in 0..100 {
            let x: f64 = a.standard_normal();
            let y: f64 = b.standard_normal();
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn derived_streams_differ_from_parent_and_each_other() {
        let mut parent = RngStream::new(7);
        let mut c0 = RngStream::derive(7, 0);
        let mut c1 = RngStream::derive(7, 1);
        let (p, a, b) = (parent.next_u64(), c0.next_u64(), c1.next_u64());
        assert_ne!(p, a);
        assert_ne!(a, b);
    }

    #[test]
    fn seed_range_overlap() {
        let train = SeedRange::new(0, 1 << 31);
        let test = SeedRange::new(1 << 31, 1 << 32);
        assert!(!train.overlaps(&test));
        assert!(train.overlaps(&SeedRange::new((1 << 31) - 1, 1 << 31)));
        assert!(train.contains(0));
        assert!(!train.contains(1 << 31));
        assert_eq!(test.seed_at(0), Some(1 << 31));
        assert_eq!(train.seed_at(1 << 31), None);
    }
}
